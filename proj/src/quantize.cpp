#include "limoseg/quantize.hpp"

#include "limoseg/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace limoseg {

std::string to_string(Precision p) {
    switch (p) {
        case Precision::kFp32: return "fp32";
        case Precision::kFp16: return "fp16";
        case Precision::kInt8: return "int8";
    }
    return "?";
}

Precision parse_precision(const std::string& text) {
    if (text == "fp32") return Precision::kFp32;
    if (text == "fp16") return Precision::kFp16;
    if (text == "int8") return Precision::kInt8;
    throw InvalidConfigError("unknown precision '" + text + "' (expected fp32, fp16 or int8)");
}

float round_fp16(float x) { return static_cast<float>(Eigen::half(x)); }

float int8_scale(std::span<const float> values) {
    float m = 0.0f;
    for (float v : values) m = std::max(m, std::abs(v));
    return m > 0.0f ? m / 127.0f : 1.0f;
}

std::int8_t int8_quantize(float x, float scale) {
    // default rounding mode is to-nearest, ties to even
    const float q = std::nearbyint(x / scale);
    return static_cast<std::int8_t>(std::clamp(q, -127.0f, 127.0f));
}

float int8_fake(float x, float scale) { return static_cast<float>(int8_quantize(x, scale)) * scale; }

float fake_quantize(std::span<float> values, Precision p) {
    switch (p) {
        case Precision::kFp32: return 1.0f;
        case Precision::kFp16:
            for (float& v : values) v = round_fp16(v);
            return 1.0f;
        case Precision::kInt8: {
            const float s = int8_scale(values);
            for (float& v : values) v = int8_fake(v, s);
            return s;
        }
    }
    return 1.0f;
}

SizeReport model_size(const Checkpoint& ck, Precision p) {
    SizeReport r;
    r.precision = p;
    const std::size_t elem = p == Precision::kFp32 ? 4 : p == Precision::kFp16 ? 2 : 1;
    for (const auto& t : ck.tensors) {
        r.parameters += t.data.size();
        r.bytes += t.data.size() * elem;
        if (p == Precision::kInt8) r.bytes += sizeof(float);
    }
    return r;
}

QuantizedCheckpoint quantize_weights(const Checkpoint& ck, Precision p) {
    QuantizedCheckpoint out;
    out.checkpoint = ck;
    out.checkpoint.metadata.set("precision", to_string(p));
    for (auto& t : out.checkpoint.tensors) {
        const float s = fake_quantize(t.data, p);
        if (p == Precision::kInt8) out.weight_scales[t.name] = s;
    }
    out.size = model_size(ck, p);
    return out;
}

ActivationScales calibrate_activations(const Model& model, const std::vector<BevWindow>& windows, int k) {
    if (k < 1) throw CalibrationError("calibration needs at least one window");
    if (static_cast<std::size_t>(k) > windows.size())
        throw CalibrationError("calibration asks for " + std::to_string(k) + " windows but only " +
                               std::to_string(windows.size()) + " are available");
    std::map<std::string, float> maxabs;
    const ActivationHook record = [&](const std::string& name, const ad::Tensor& a) {
        float& m = maxabs[name];
        for (float v : a.data()) m = std::max(m, std::abs(v));
        return a;
    };
    ad::NoGradGuard no_grad;
    for (int i = 0; i < k; ++i) (void)model.forward({&windows[static_cast<std::size_t>(i)]}, record);
    ActivationScales s;
    s.windows = k;
    for (const auto& [name, m] : maxabs) s.scales[name] = m > 0.0f ? m / 127.0f : 1.0f;
    return s;
}

namespace {

Model quantized_copy(const Model& model, Precision p) {
    Model q = model.clone();
    for (auto& t : q.parameters()) fake_quantize(t.storage(), p);
    return q;
}

ActivationHook make_hook(const QuantScheme& scheme) {
    switch (scheme.mode) {
        case Precision::kFp32: return {};
        case Precision::kFp16:
            return [](const std::string&, const ad::Tensor& a) {
                ad::Buffer<float> v(a.data().begin(), a.data().end());
                for (float& x : v) x = round_fp16(x);
                return ad::Tensor::from(a.shape(), std::move(v));
            };
        case Precision::kInt8: {
            const auto scales = scheme.activations->scales;
            return [scales](const std::string& name, const ad::Tensor& a) {
                const auto it = scales.find(name);
                if (it == scales.end()) throw CalibrationError("no calibrated scale for activation '" + name + "'");
                ad::Buffer<float> v(a.data().begin(), a.data().end());
                for (float& x : v) x = int8_fake(x, it->second);
                return ad::Tensor::from(a.shape(), std::move(v));
            };
        }
    }
    return {};
}

}  // namespace

QuantizedModel::QuantizedModel(const Model& model, QuantScheme scheme)
    : model_(quantized_copy(model, scheme.mode)), scheme_(std::move(scheme)) {
    if (scheme_.mode == Precision::kInt8 && (!scheme_.activations || scheme_.activations->scales.empty()))
        throw CalibrationError("int8 inference needs calibrated activation scales");
    hook_ = make_hook(scheme_);
}

ad::Tensor QuantizedModel::forward(const std::vector<const BevWindow*>& batch) const {
    ad::NoGradGuard no_grad;
    return model_.forward(batch, hook_);
}

ad::Tensor quantized_forward(const Model& model, const BevWindow& window, const QuantScheme& scheme) {
    return QuantizedModel(model, scheme).forward(window);
}

}  // namespace limoseg
