#include "limoseg/evaluate.hpp"

#include "limoseg/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace limoseg {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

void accumulate(const Mask& prediction, const Mask& label, const Mask& occupancy, ConfusionCounts& counts) {
    if (!prediction.same_shape(label) || !prediction.same_shape(occupancy)) {
        throw ShapeError("accumulate: prediction, label and occupancy masks differ in shape");
    }
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        if (!occupancy.data[i]) continue;
        const bool pred = prediction.data[i] == kMoving;
        const bool truth = label.data[i] == kMoving;
        if (pred && truth) {
            ++counts.tp;
        } else if (pred) {
            ++counts.fp;
        } else if (truth) {
            ++counts.fn;
        } else {
            ++counts.tn;
        }
    }
}

std::optional<double> iou_moving(const ConfusionCounts& c) {
    const auto denom = c.tp + c.fp + c.fn;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::optional<double> precision(const ConfusionCounts& c) {
    if (c.tp + c.fp == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

std::optional<double> recall(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

std::string format_metric(const std::optional<double>& value) {
    if (!value) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *value);
    return buf;
}

ConfusionCounts evaluate_model(const Model& model, const std::vector<BevWindow>& windows, int batch_size,
                               const ActivationHook& hook) {
    if (batch_size < 1) throw InvalidConfigError("batch size must be >= 1");
    ad::NoGradGuard no_grad;
    ConfusionCounts counts;
    for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(windows.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const BevWindow*> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(&windows[i]);
        const auto masks = predict_masks(model.forward(batch, hook));
        for (std::size_t i = 0; i < masks.size(); ++i) {
            accumulate(masks[i], batch[i]->label_mask, batch[i]->occupancy_mask, counts);
        }
    }
    return counts;
}

std::string eval_csv_row(const EvalSummary& s) {
    return s.variant + "," + s.residual_mode + "," + s.precision + "," + format_metric(iou_moving(s.counts)) + "," +
           std::to_string(s.counts.tp) + "," + std::to_string(s.counts.fp) + "," + std::to_string(s.counts.fn) + "," +
           std::to_string(s.counts.tn);
}

double percentile_nearest_rank(std::vector<double> samples, double p) {
    if (samples.empty()) throw PreconditionError("percentile of an empty sample");
    if (!(p > 0.0 && p <= 100.0)) throw PreconditionError("percentile must be in (0, 100]");
    std::sort(samples.begin(), samples.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(samples.size())));
    return samples[std::max<std::size_t>(rank, 1) - 1];
}

LatencyReport benchmark(const Model& model, const BevWindow& window, int warmup, int iterations,
                        const std::string& precision_tag, const ActivationHook& hook) {
    if (iterations < 10) throw PreconditionError("benchmark needs at least 10 timed iterations");
    if (warmup < 0) throw PreconditionError("warmup must be >= 0");
    ad::NoGradGuard no_grad;
    const ad::Tensor input = make_input({&window}, model.config());
    LatencyReport report;
    report.warmup = warmup;
    report.iterations = iterations;
    report.precision = precision_tag;
    for (int i = 0; i < warmup; ++i) (void)model.forward(input, hook);
    report.times_ms.reserve(static_cast<std::size_t>(iterations));
    for (int i = 0; i < iterations; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const ad::Tensor out = model.forward(input, hook);
        const auto t1 = std::chrono::steady_clock::now();
        report.times_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    report.mean_ms = std::accumulate(report.times_ms.begin(), report.times_ms.end(), 0.0) / iterations;
    report.p50_ms = percentile_nearest_rank(report.times_ms, 50.0);
    report.p99_ms = percentile_nearest_rank(report.times_ms, 99.0);
    return report;
}

std::string latency_csv(const LatencyReport& r) {
    std::string out = "iteration,ms,precision\n";
    char buf[96];
    for (std::size_t i = 0; i < r.times_ms.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%s\n", i, r.times_ms[i], r.precision.c_str());
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "mean,%.6f,%s\n", r.mean_ms, r.precision.c_str());
    out += buf;
    std::snprintf(buf, sizeof buf, "p50,%.6f,%s\n", r.p50_ms, r.precision.c_str());
    out += buf;
    std::snprintf(buf, sizeof buf, "p99,%.6f,%s\n", r.p99_ms, r.precision.c_str());
    out += buf;
    return out;
}

}  // namespace limoseg
