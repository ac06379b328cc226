#include "limoseg/error.hpp"
#include "limoseg/train.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace limoseg;

namespace {

std::vector<BevWindow> synthetic_windows(int frames, std::uint64_t seed, int sequence_id = 0) {
    SceneConfig sc;
    sc.frames = frames;
    sc.seed = seed;
    std::vector<BevWindow> out;
    for (const auto& w : build_windows(generate_scene(sc).frames, sequence_id)) out.push_back(build_bev_window(w, GridSpec{}));
    return out;
}

TrainConfig small_config() {
    TrainConfig c;
    c.model.encoder_channels = {4, 8, 8};
    c.model.joint_channels = {8, 8, 8, 8};
    c.model.decoder_channels = {8, 8, 8, 8, 8};
    return c;
}

}  // namespace

TEST(ClassWeight, HandEvaluated) {
    EXPECT_NEAR(class_weight(0.95, 1.02), 1.0 / std::log(1.97), 1e-12);
    EXPECT_NEAR(class_weight(0.95, 1.02), 1.475, 1e-3);
    EXPECT_NEAR(class_weight(0.05, 1.02), 14.78, 1e-2);
    EXPECT_NEAR(class_weight(0.5, 1.02), 1.0 / std::log(1.52), 1e-12);
    // 2.387 quoted upstream is a truncation of 2.3883
    EXPECT_NEAR(class_weight(0.5, 1.02), 2.387, 2e-3);
    EXPECT_NEAR(class_weight(0.0, 1.02), 50.5, 0.01);
    EXPECT_THROW(class_weight(0.5, 1.0), InvalidConfigError);
}

TEST(ClassWeight, MonotoneDecreasing) {
    for (int i = 0; i < 100; ++i) EXPECT_GT(class_weight(i / 100.0, 1.02), class_weight((i + 1) / 100.0, 1.02));
}

TEST(ClassFrequencies, CountsOccupiedPixels) {
    BevWindow w;
    w.label_mask = Mask(1, 4, kStatic);
    w.occupancy_mask = Mask(1, 4, 0);
    w.label_mask.data = {1, 1, 0, 1};
    w.occupancy_mask.data = {1, 0, 1, 1};
    const ClassStats s = class_frequencies({w, w});
    EXPECT_DOUBLE_EQ(s.f_moving, 2.0 / 3.0);
    EXPECT_NEAR(s.f_static + s.f_moving, 1.0, 1e-9);
    EXPECT_DOUBLE_EQ(s.w_moving, class_weight(2.0 / 3.0, 1.02));
    EXPECT_GT(s.w_static, 0.0);
}

TEST(ClassFrequencies, NoMovingPixels) {
    BevWindow w;
    w.label_mask = Mask(2, 2, kStatic);
    w.occupancy_mask = Mask(2, 2, 1);
    const ClassStats s = class_frequencies({w});
    EXPECT_EQ(s.f_moving, 0.0);
    EXPECT_NEAR(s.w_moving, 50.5, 0.01);
    EXPECT_TRUE(std::isfinite(s.w_moving));
}

TEST(ClassFrequencies, EmptyDataset) {
    EXPECT_THROW(class_frequencies({}), PreconditionError);
    BevWindow w;
    w.label_mask = Mask(2, 2, kStatic);
    w.occupancy_mask = Mask(2, 2, 0);
    EXPECT_THROW(class_frequencies({w}), PreconditionError);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), InvalidConfigError);
    c = {};
    c.epsilon = 1.0;
    EXPECT_THROW(c.validate(), InvalidConfigError);
    c = {};
    c.learning_rate = -1;
    EXPECT_THROW(c.validate(), InvalidConfigError);
    EXPECT_EQ(TrainConfig{}.batch_size, 12);
    EXPECT_EQ(TrainConfig{}.epochs, 30);
}

TEST(TrainConfig, KeyValueRoundTrip) {
    TrainConfig c = small_config();
    c.epochs = 7;
    c.learning_rate = 3e-4;
    c.seed = 42;
    c.shuffle = false;
    const TrainConfig back = TrainConfig::from_kv(KeyValues::parse(c.to_kv().str()));
    EXPECT_EQ(back.epochs, 7);
    EXPECT_EQ(back.learning_rate, 3e-4);
    EXPECT_EQ(back.seed, 42u);
    EXPECT_FALSE(back.shuffle);
    EXPECT_TRUE(back.model.same_architecture(c.model));
}

TEST(Train, EmptyDataset) { EXPECT_THROW(train({}, {}, small_config()), PreconditionError); }

TEST(Train, ZeroLearningRateKeepsWeights) {
    const auto ws = synthetic_windows(3, 1);
    TrainConfig c = small_config();
    c.epochs = 1;
    c.learning_rate = 0.0;
    c.seed = 5;
    const TrainResult r = train(ws, {}, c);
    ModelConfig mc = c.model;
    mc.init_seed = c.seed;
    const Model init(mc);
    for (std::size_t i = 0; i < init.parameters().size(); ++i)
        EXPECT_EQ(r.last.parameters()[i].storage(), init.parameters()[i].storage()) << init.parameter_names()[i];
}

TEST(Train, NonFiniteLossAborts) {
    auto ws = synthetic_windows(3, 1);
    ws[0].frames[0].data[5] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig c = small_config();
    c.epochs = 1;
    try {
        train(ws, {}, c);
        FAIL() << "expected NonFiniteLossError";
    } catch (const NonFiniteLossError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
    }
}

TEST(Train, SameSeedIdenticalMetricsAndWeights) {
    const auto tr = synthetic_windows(8, 2, 0);
    const auto va = synthetic_windows(5, 3, 1);
    TrainConfig c = small_config();
    c.epochs = 3;
    c.batch_size = 4;
    c.seed = 9;
    const TrainResult a = train(tr, va, c);
    const TrainResult b = train(tr, va, c);
    EXPECT_EQ(metrics_csv(a.log), metrics_csv(b.log));
    for (std::size_t i = 0; i < a.last.parameters().size(); ++i)
        EXPECT_EQ(a.last.parameters()[i].storage(), b.last.parameters()[i].storage());
    c.seed = 10;
    EXPECT_NE(metrics_csv(train(tr, va, c).log), metrics_csv(a.log));
}

TEST(Train, MetricsCsvLayout) {
    const auto tr = synthetic_windows(4, 2);
    TrainConfig c = small_config();
    c.epochs = 2;
    const TrainResult r = train(tr, tr, c);
    const std::string csv = metrics_csv(r.log);
    EXPECT_EQ(csv.rfind("epoch,train_loss,val_iou_moving,val_precision,val_recall\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    ASSERT_EQ(r.log.size(), 2u);
    EXPECT_GE(r.best_epoch, 1);
    // the retained model reproduces the logged best score
    EXPECT_EQ(iou_moving(evaluate_model(r.best, tr)), r.best_iou);
}

TEST(Train, LossDecreasesWithUniformWeights) {
    // balanced labels: every occupied pixel of the left half is moving
    auto ws = synthetic_windows(8, 4);
    for (auto& w : ws)
        for (int r = 0; r < w.rows(); ++r)
            for (int col = 0; col < w.cols(); ++col) w.label_mask.at(r, col) = col < w.cols() / 2 ? kMoving : kStatic;
    std::vector<double> drops;
    for (std::uint64_t seed : {1, 2, 3}) {
        TrainConfig c = small_config();
        c.epochs = 5;
        c.batch_size = 2;
        c.uniform_weights = true;
        c.seed = seed;
        const TrainResult r = train(ws, {}, c);
        drops.push_back(r.log.front().train_loss - r.log.back().train_loss);
    }
    std::sort(drops.begin(), drops.end());
    EXPECT_GT(drops[1], 0.0);
}

TEST(Train, OverfitsFiveWindows) {
    auto all = synthetic_windows(12, 7);
    std::vector<BevWindow> ws;
    for (auto& w : all)
        if (w.motion_points >= 20 && ws.size() < 5) ws.push_back(w);
    ASSERT_EQ(ws.size(), 5u);
    TrainConfig c;
    c.epochs = 200;
    c.seed = 1;
    const TrainResult r = train(ws, {}, c);
    const auto iou = iou_moving(evaluate_model(r.last, ws));
    ASSERT_TRUE(iou.has_value());
    EXPECT_GE(*iou, 0.95);
}

TEST(SplitDataset, Examples) {
    std::vector<int> ids;
    for (int i = 0; i <= 10; ++i) ids.push_back(i);
    const SequenceSplit s = split_dataset(ids, 8);
    EXPECT_EQ(s.train.size(), 10u);
    EXPECT_EQ(s.validation, 8);
    EXPECT_EQ(std::count(s.train.begin(), s.train.end(), 8), 0);
    const SequenceSplit two = split_dataset({3, 4}, 4);
    EXPECT_EQ(two.train, std::vector<int>{3});
    EXPECT_THROW(split_dataset(ids, 99), PreconditionError);
    EXPECT_THROW(split_dataset({1}, 1), PreconditionError);
}

TEST(SplitDataset, NoLeakage) {
    std::vector<BevWindow> ws(9);
    for (int i = 0; i < 9; ++i) ws[i].sequence_id = i % 3;
    std::vector<BevWindow> tr, va;
    partition_windows(ws, split_dataset({0, 1, 2}, 1), tr, va);
    EXPECT_EQ(tr.size(), 6u);
    EXPECT_EQ(va.size(), 3u);
    for (const auto& w : tr) EXPECT_NE(w.sequence_id, 1);
    for (const auto& w : va) EXPECT_EQ(w.sequence_id, 1);
}
