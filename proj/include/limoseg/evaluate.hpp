#pragma once

#include "limoseg/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace limoseg {

/// Pixel counts over occupied cells, moving as the positive class.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o);
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

void accumulate(const Mask& prediction, const Mask& label, const Mask& occupancy, ConfusionCounts& counts);

/// tp / (tp + fp + fn); empty when the denominator is zero.
std::optional<double> iou_moving(const ConfusionCounts& counts);
std::optional<double> precision(const ConfusionCounts& counts);
std::optional<double> recall(const ConfusionCounts& counts);
/// Fixed-point text, or "n/a".
std::string format_metric(const std::optional<double>& value);

/// Global counts of the model's predictions over `windows`.
ConfusionCounts evaluate_model(const Model& model, const std::vector<BevWindow>& windows, int batch_size = 12,
                               const ActivationHook& hook = {});

/// Row of the evaluation summary CSV.
struct EvalSummary {
    std::string variant;
    std::string residual_mode;
    std::string precision = "fp32";
    ConfusionCounts counts;
};

inline constexpr const char* kEvalCsvHeader = "variant,residual_mode,precision,iou_moving,tp,fp,fn,tn";
std::string eval_csv_row(const EvalSummary& summary);

struct LatencyReport {
    int warmup = 0;
    int iterations = 0;
    std::vector<double> times_ms;
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p99_ms = 0.0;
    std::string precision = "fp32";
};

/// Nearest-rank percentile (p in (0,100]) of unsorted samples.
double percentile_nearest_rank(std::vector<double> samples, double p);

/// Timed forward passes over one preprocessed window. Requires iterations >= 10.
LatencyReport benchmark(const Model& model, const BevWindow& window, int warmup, int iterations,
                        const std::string& precision = "fp32", const ActivationHook& hook = {});

/// One `iteration,ms` row per timed pass, then summary rows.
std::string latency_csv(const LatencyReport& report);

}  // namespace limoseg
