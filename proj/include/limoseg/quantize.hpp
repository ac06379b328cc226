#pragma once

#include "limoseg/model.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace limoseg {

enum class Precision { kFp32, kFp16, kInt8 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

/// Nearest IEEE binary16 value (ties to even), back in float.
float round_fp16(float x);

/// maxabs / 127, or 1 for an all-zero tensor.
float int8_scale(std::span<const float> values);
/// round-half-to-even(x / scale) clamped to [-127, 127].
std::int8_t int8_quantize(float x, float scale);
/// Quantize-dequantize.
float int8_fake(float x, float scale);

/// In-place quantize-dequantize of a whole tensor at `p` (per-tensor scale for int8).
/// Returns the scale used (1 for fp32/fp16).
float fake_quantize(std::span<float> values, Precision p);

struct SizeReport {
    Precision precision = Precision::kFp32;
    std::size_t parameters = 0;
    /// Parameter payload at the target precision, plus one float scale per tensor for int8.
    std::size_t bytes = 0;
    double megabytes() const { return static_cast<double>(bytes) / (1024.0 * 1024.0); }
};

SizeReport model_size(const Checkpoint& checkpoint, Precision p);

struct QuantizedCheckpoint {
    Checkpoint checkpoint;  // dequantized weights in working precision
    std::map<std::string, float> weight_scales;  // int8 only
    SizeReport size;
};

QuantizedCheckpoint quantize_weights(const Checkpoint& checkpoint, Precision p);

/// Per-activation (block output) scales: max-abs over the calibration set / 127.
struct ActivationScales {
    std::map<std::string, float> scales;
    int windows = 0;
};

/// Uses the first K windows. Throws CalibrationError for K < 1 or K > windows.size().
ActivationScales calibrate_activations(const Model& model, const std::vector<BevWindow>& windows, int k);

struct QuantScheme {
    Precision mode = Precision::kFp32;
    std::optional<ActivationScales> activations;  // required for int8
};

/// Fake-quantized model: weights quantize-dequantized once, block outputs on every forward.
class QuantizedModel {
public:
    /// Throws CalibrationError when an int8 scheme lacks activation scales.
    QuantizedModel(const Model& model, QuantScheme scheme);

    const Model& model() const { return model_; }
    const QuantScheme& scheme() const { return scheme_; }
    /// Hook applying the activation quantization (empty for fp32).
    const ActivationHook& hook() const { return hook_; }

    ad::Tensor forward(const std::vector<const BevWindow*>& batch) const;
    ad::Tensor forward(const BevWindow& window) const { return forward(std::vector<const BevWindow*>{&window}); }

private:
    Model model_;
    QuantScheme scheme_;
    ActivationHook hook_;
};

/// Logits for one window under `scheme`.
ad::Tensor quantized_forward(const Model& model, const BevWindow& window, const QuantScheme& scheme);

}  // namespace limoseg
