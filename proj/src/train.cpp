#include "limoseg/train.hpp"

#include "limoseg/error.hpp"
#include "limoseg/log.hpp"
#include "limoseg/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

namespace limoseg {

void TrainConfig::validate() const {
    if (batch_size < 1) throw InvalidConfigError("batch size must be >= 1");
    if (epochs < 0) throw InvalidConfigError("epochs must be >= 0");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw InvalidConfigError("learning rate must be finite and >= 0");
    if (!(epsilon > 1.0)) throw InvalidConfigError("epsilon must be > 1");
    model.validate();
}

KeyValues TrainConfig::to_kv() const {
    KeyValues kv = model.to_kv();
    kv.set("train.batch_size", batch_size);
    kv.set("train.epochs", epochs);
    kv.set("train.lr", learning_rate);
    kv.set("train.epsilon", epsilon);
    kv.set("train.seed", static_cast<long long>(seed));
    kv.set("train.shuffle", shuffle);
    kv.set("train.uniform_weights", uniform_weights);
    return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.model = ModelConfig::from_kv(kv);
    c.batch_size = kv.get_or("train.batch_size", c.batch_size);
    c.epochs = kv.get_or("train.epochs", c.epochs);
    c.learning_rate = kv.get_or("train.lr", c.learning_rate);
    c.epsilon = kv.get_or("train.epsilon", c.epsilon);
    c.seed = static_cast<std::uint64_t>(kv.get_or("train.seed", 0LL));
    c.shuffle = kv.get_or("train.shuffle", c.shuffle);
    c.uniform_weights = kv.get_or("train.uniform_weights", c.uniform_weights);
    c.validate();
    return c;
}

double class_weight(double f, double epsilon) {
    if (!(epsilon > 1.0)) throw InvalidConfigError("epsilon must be > 1");
    if (f < 0.0 || f > 1.0) throw RangeError("class frequency outside [0, 1]");
    return 1.0 / std::log(f + epsilon);
}

ClassStats class_frequencies(const std::vector<BevWindow>& windows, double epsilon) {
    std::uint64_t moving = 0, occupied = 0;
    for (const auto& w : windows) {
        for (std::size_t i = 0; i < w.occupancy_mask.size(); ++i) {
            if (!w.occupancy_mask.data[i]) continue;
            ++occupied;
            if (w.label_mask.data[i] == kMoving) ++moving;
        }
    }
    if (occupied == 0) throw PreconditionError("class frequencies: dataset has no occupied pixels");
    ClassStats s;
    s.f_moving = static_cast<double>(moving) / static_cast<double>(occupied);
    s.f_static = static_cast<double>(occupied - moving) / static_cast<double>(occupied);
    s.w_static = class_weight(s.f_static, epsilon);
    s.w_moving = class_weight(s.f_moving, epsilon);
    return s;
}

std::string metrics_csv(const std::vector<EpochMetrics>& log) {
    std::string out = std::string(kMetricsCsvHeader) + "\n";
    char buf[64];
    for (const auto& m : log) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,", m.epoch, m.train_loss);
        out += buf;
        out += format_metric(m.val_iou) + "," + format_metric(m.val_precision) + "," + format_metric(m.val_recall) +
               "\n";
    }
    return out;
}

namespace {

void check_grid(const std::vector<BevWindow>& windows, const ModelConfig& mc, const char* what) {
    for (const auto& w : windows) {
        if (static_cast<int>(w.label_mask.rows) != mc.rows || static_cast<int>(w.label_mask.cols) != mc.cols) {
            throw ShapeError(std::string(what) + " window grid " + std::to_string(w.label_mask.rows) + "x" +
                             std::to_string(w.label_mask.cols) + " does not match model grid " +
                             std::to_string(mc.rows) + "x" + std::to_string(mc.cols));
        }
    }
}

}  // namespace

TrainResult train(const std::vector<BevWindow>& train_set, const std::vector<BevWindow>& val_set,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.empty()) throw PreconditionError("train: empty dataset");
    ModelConfig mc = config.model;
    mc.init_seed = config.seed;
    check_grid(train_set, mc, "training");
    check_grid(val_set, mc, "validation");

    const ClassStats stats = class_frequencies(train_set, config.epsilon);
    const std::array<double, 2> weights = config.uniform_weights ? std::array<double, 2>{1.0, 1.0} : stats.weights();

    Model model(mc);
    TrainResult result{model.clone(), model.clone(), -1, std::nullopt, stats, {}};
    ad::AdamState adam;
    const ad::AdamConfig adam_config{config.learning_rate, 0.9, 0.999, 1e-8};
    Rng rng(Rng::derive(config.seed, 0x5348));

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    const std::size_t pixels = static_cast<std::size_t>(mc.rows) * static_cast<std::size_t>(mc.cols);
    bool have_best = false;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        if (config.shuffle) {
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        double loss_sum = 0.0;
        int loss_batches = 0;
        int batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<const BevWindow*> batch;
            std::vector<std::uint8_t> target, valid;
            target.reserve((end - start) * pixels);
            valid.reserve((end - start) * pixels);
            for (std::size_t i = start; i < end; ++i) {
                const BevWindow& w = train_set[order[i]];
                batch.push_back(&w);
                target.insert(target.end(), w.label_mask.data.begin(), w.label_mask.data.end());
                valid.insert(valid.end(), w.occupancy_mask.data.begin(), w.occupancy_mask.data.end());
            }
            // nothing to learn from a batch of empty grids
            if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) continue;

            model.zero_grad();
            const ad::Tensor logits = model.forward(batch);
            const ad::Tensor loss = ad::weighted_ce<float>(logits, target, weights, valid);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                char buf[128];
                std::snprintf(buf, sizeof buf, "non-finite loss %g at epoch %d, batch %d", value, epoch, batch_index);
                throw NonFiniteLossError(buf);
            }
            loss.backward();
            ad::adam_step(model.parameters(), adam, adam_config);
            loss_sum += value;
            ++loss_batches;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss_batches ? loss_sum / loss_batches : 0.0;
        if (!val_set.empty()) {
            const ConfusionCounts counts = evaluate_model(model, val_set, config.batch_size);
            m.val_iou = iou_moving(counts);
            m.val_precision = precision(counts);
            m.val_recall = recall(counts);
        }
        result.log.push_back(m);

        // first epoch always seeds the best; later ones must strictly improve
        const double score = m.val_iou.value_or(-1.0);
        if (!have_best || score > result.best_iou.value_or(-1.0)) {
            result.best = model.clone();
            result.best_epoch = epoch;
            result.best_iou = m.val_iou;
            have_best = true;
        }
        if (on_epoch) on_epoch(m);
    }
    result.last = std::move(model);
    if (!have_best) {
        result.best = result.last.clone();
        result.best_epoch = 0;
    }
    return result;
}

KeyValues training_metadata(const TrainResult& result, int epoch) {
    KeyValues kv;
    kv.set("epoch", epoch);
    kv.set("best_epoch", result.best_epoch);
    kv.set("best_val_iou", format_metric(result.best_iou));
    kv.set("f_static", result.stats.f_static);
    kv.set("f_moving", result.stats.f_moving);
    kv.set("w_static", result.stats.w_static);
    kv.set("w_moving", result.stats.w_moving);
    return kv;
}

SequenceSplit split_dataset(const std::vector<int>& sequence_ids, int validation_id) {
    const std::set<int> unique(sequence_ids.begin(), sequence_ids.end());
    if (unique.size() < 2) throw PreconditionError("split needs at least 2 sequences");
    if (!unique.contains(validation_id))
        throw PreconditionError("validation sequence " + std::to_string(validation_id) + " is not in the dataset");
    SequenceSplit s;
    s.validation = validation_id;
    for (int id : unique) {
        if (id != validation_id) s.train.push_back(id);
    }
    return s;
}

void partition_windows(const std::vector<BevWindow>& windows, const SequenceSplit& split,
                       std::vector<BevWindow>& train_out, std::vector<BevWindow>& validation_out) {
    const std::set<int> train_ids(split.train.begin(), split.train.end());
    for (const auto& w : windows) {
        if (w.sequence_id == split.validation) {
            validation_out.push_back(w);
        } else if (train_ids.contains(w.sequence_id)) {
            train_out.push_back(w);
        }
    }
}

}  // namespace limoseg
