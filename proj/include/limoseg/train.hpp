#pragma once

#include "limoseg/evaluate.hpp"
#include "limoseg/model.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace limoseg {

struct TrainConfig {
    int batch_size = 12;
    int epochs = 30;
    double learning_rate = 1e-3;
    double epsilon = 1.02;
    std::uint64_t seed = 0;
    bool shuffle = true;
    /// Use w = (1, 1) instead of inverse-log-frequency weights.
    bool uniform_weights = false;
    ModelConfig model;

    /// Throws InvalidConfigError.
    void validate() const;
    KeyValues to_kv() const;
    /// Reads `train.*` keys and the model keys; unknown keys are ignored.
    static TrainConfig from_kv(const KeyValues& kv);
};

struct ClassStats {
    double f_static = 0.0;
    double f_moving = 0.0;
    double w_static = 0.0;
    double w_moving = 0.0;

    std::array<double, 2> weights() const { return {w_static, w_moving}; }
};

/// w = 1 / ln(f + ε), natural log.
double class_weight(double frequency, double epsilon);

/// Occupied-pixel class frequencies over the dataset. Throws PreconditionError
/// when there are no occupied pixels.
ClassStats class_frequencies(const std::vector<BevWindow>& windows, double epsilon = 1.02);

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_iou;
    std::optional<double> val_precision;
    std::optional<double> val_recall;
};

inline constexpr const char* kMetricsCsvHeader = "epoch,train_loss,val_iou_moving,val_precision,val_recall";
std::string metrics_csv(const std::vector<EpochMetrics>& log);

struct TrainResult {
    Model best;        // weights from the epoch with the best validation IoU
    Model last;        // weights after the final epoch
    int best_epoch = -1;
    std::optional<double> best_iou;
    ClassStats stats;
    std::vector<EpochMetrics> log;
};

/// Called after each epoch (for progress output).
using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch Adam on weighted cross-entropy over occupied pixels. Results
/// depend only on (train set, validation set, config).
TrainResult train(const std::vector<BevWindow>& train_set, const std::vector<BevWindow>& val_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Metadata stored alongside trained weights.
KeyValues training_metadata(const TrainResult& result, int epoch);

struct SequenceSplit {
    std::vector<int> train;
    int validation = 0;
};

/// Holds out `validation_id`; needs >= 2 sequences.
SequenceSplit split_dataset(const std::vector<int>& sequence_ids, int validation_id);

/// Partitions windows by the split.
void partition_windows(const std::vector<BevWindow>& windows, const SequenceSplit& split,
                       std::vector<BevWindow>& train, std::vector<BevWindow>& validation);

}  // namespace limoseg
