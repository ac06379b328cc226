#include "limoseg/autodiff.hpp"
#include "limoseg/error.hpp"
#include "limoseg/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

using namespace limoseg;
using namespace limoseg::ad;

namespace {

template <typename T>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return BasicTensor<T>::from(shape, std::move(v), grad);
}

// naive cross-correlation with zero padding
std::vector<double> naive_conv(const DoubleTensor& x, const DoubleTensor& w, const DoubleTensor& b) {
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0), k = w.dim(2), p = (k - 1) / 2;
    std::vector<double> out(static_cast<std::size_t>(n) * co * h * wd);
    const auto xd = x.data();
    const auto wt = w.data();
    for (int s = 0; s < n; ++s)
        for (int o = 0; o < co; ++o)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < wd; ++j) {
                    double acc = b.data()[o];
                    for (int c = 0; c < ci; ++c)
                        for (int u = 0; u < k; ++u)
                            for (int v = 0; v < k; ++v) {
                                const int ii = i + u - p, jj = j + v - p;
                                if (ii < 0 || jj < 0 || ii >= h || jj >= wd) continue;
                                acc += xd[((s * ci + c) * h + ii) * wd + jj] * wt[((o * ci + c) * k + u) * k + v];
                            }
                    out[((s * co + o) * h + i) * wd + j] = acc;
                }
    return out;
}

}  // namespace

TEST(Tensor, FromChecksSize) {
    EXPECT_THROW(Tensor::from({2, 3}, std::vector<float>(5)), ShapeError);
    const Tensor t = Tensor::full({2, 2}, 3.f);
    EXPECT_EQ(t.numel(), 4u);
    EXPECT_EQ(t.data()[3], 3.f);
}

TEST(Conv2d, IdentityKernel) {
    Rng rng(1);
    const Tensor x = random_tensor<float>({2, 1, 5, 4}, rng, false);
    const Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.f), Tensor::zeros({1}), 0);
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), std::vector<float>(x.data().begin(), x.data().end()));
}

TEST(Conv2d, ZeroWeightsGiveBias) {
    Rng rng(2);
    const Tensor x = random_tensor<float>({1, 3, 4, 4}, rng, false);
    const Tensor y = conv2d(x, Tensor::zeros({2, 3, 3, 3}), Tensor::from({2}, {0.25f, -1.5f}), 1);
    for (int i = 0; i < 16; ++i) {
        EXPECT_EQ(y.data()[i], 0.25f);
        EXPECT_EQ(y.data()[16 + i], -1.5f);
    }
}

TEST(Conv2d, MatchesNaiveLoops) {
    Rng rng(3);
    for (int k : {1, 3, 5}) {
        const DoubleTensor x = random_tensor<double>({2, 3, 6, 7}, rng, false);
        const DoubleTensor w = random_tensor<double>({4, 3, k, k}, rng, false);
        const DoubleTensor b = random_tensor<double>({4}, rng, false);
        const DoubleTensor y = conv2d(x, w, b, (k - 1) / 2);
        const auto ref = naive_conv(x, w, b);
        ASSERT_EQ(y.numel(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
    }
}

TEST(Conv2d, ShapeErrors) {
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1), ShapeError);
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1}), 0), ShapeError);
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1}), 0), ShapeError);
}

TEST(Conv2d, Gradcheck) {
    Rng rng(4);
    const DoubleTensor x = random_tensor<double>({1, 1, 4, 4}, rng);
    const DoubleTensor w = random_tensor<double>({1, 1, 3, 3}, rng);
    const DoubleTensor b = random_tensor<double>({1}, rng);
    const auto r = gradcheck([](const std::vector<DoubleTensor>& in) { return conv2d(in[0], in[1], in[2], 1); }, {x, w, b}, 1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
    EXPECT_EQ(r.checked, 16u + 9u + 1u);

    const DoubleTensor x2 = random_tensor<double>({2, 3, 6, 6}, rng);
    const DoubleTensor w2 = random_tensor<double>({2, 3, 3, 3}, rng);
    const DoubleTensor b2 = random_tensor<double>({2}, rng);
    const auto r2 = gradcheck([](const std::vector<DoubleTensor>& in) { return conv2d(in[0], in[1], in[2], 1); }, {x2, w2, b2}, 1e-4);
    EXPECT_LT(r2.max_rel_error, 1e-4);
}

TEST(ConvTranspose2d, ScatterDefinition) {
    const Tensor y = conv_transpose2d(Tensor::full({1, 1, 1, 1}, 1.f), Tensor::full({1, 1, 2, 2}, 1.f), Tensor::zeros({1}));
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (float v : y.data()) EXPECT_EQ(v, 1.f);
    const Tensor z = conv_transpose2d(Tensor::zeros({2, 3, 2, 3}), Tensor::full({3, 4, 2, 2}, 0.7f), Tensor::zeros({4}));
    EXPECT_EQ(z.shape(), (Shape{2, 4, 4, 6}));
    for (float v : z.data()) EXPECT_EQ(v, 0.f);
}

TEST(ConvTranspose2d, MatchesNaiveScatter) {
    Rng rng(5);
    const DoubleTensor x = random_tensor<double>({2, 3, 3, 2}, rng, false);
    const DoubleTensor w = random_tensor<double>({3, 2, 2, 2}, rng, false);
    const DoubleTensor b = random_tensor<double>({2}, rng, false);
    const DoubleTensor y = conv_transpose2d(x, w, b);
    std::vector<double> ref(2 * 2 * 6 * 4, 0.0);
    for (int s = 0; s < 2; ++s)
        for (int o = 0; o < 2; ++o)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 4; ++j) {
                    double acc = b.data()[o];
                    for (int c = 0; c < 3; ++c)
                        acc += x.data()[((s * 3 + c) * 3 + i / 2) * 2 + j / 2] * w.data()[((c * 2 + o) * 2 + i % 2) * 2 + j % 2];
                    ref[((s * 2 + o) * 6 + i) * 4 + j] = acc;
                }
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
    EXPECT_THROW(conv_transpose2d(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({3, 1, 2, 2}), Tensor::zeros({1})), ShapeError);
}

TEST(ConvTranspose2d, Gradcheck) {
    Rng rng(6);
    const auto r = gradcheck([](const std::vector<DoubleTensor>& in) { return conv_transpose2d(in[0], in[1], in[2]); },
                             {random_tensor<double>({2, 3, 3, 3}, rng), random_tensor<double>({3, 2, 2, 2}, rng),
                              random_tensor<double>({2}, rng)},
                             1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Maxpool2, Examples) {
    const Tensor y = maxpool2(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.item(), 4.f);
    EXPECT_THROW(maxpool2(Tensor::zeros({1, 1, 3, 2})), ShapeError);
}

TEST(Maxpool2, TieBreakFirstCell) {
    const Tensor x = Tensor::full({1, 1, 4, 4}, 2.f, true);
    const Tensor y = maxpool2(x);
    for (float v : y.data()) EXPECT_EQ(v, 2.f);
    y.backward(std::vector<float>(4, 1.f));
    const auto g = x.grad();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_EQ(g[i * 4 + j], (i % 2 == 0 && j % 2 == 0) ? 1.f : 0.f) << i << "," << j;
}

TEST(Maxpool2, Gradcheck) {
    // distinct values spaced well beyond the finite-difference step
    std::vector<double> v(2 * 2 * 4 * 6);
    std::iota(v.begin(), v.end(), 0.0);
    Rng rng(7);
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    for (auto& x : v) x *= 0.01;
    const auto r = gradcheck([](const std::vector<DoubleTensor>& in) { return maxpool2(in[0]); },
                             {DoubleTensor::from({2, 2, 4, 6}, v, true)}, 1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Relu, ValuesAndGradcheck) {
    const Tensor y = relu(Tensor::from({2}, {-1.f, 2.f}));
    EXPECT_EQ(y.data()[0], 0.f);
    EXPECT_EQ(y.data()[1], 2.f);
    Rng rng(8);
    std::vector<double> v(60);
    for (auto& x : v) x = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 1.0);  // away from the kink
    const auto r = gradcheck([](const std::vector<DoubleTensor>& in) { return relu(in[0]); }, {DoubleTensor::from({1, 3, 4, 5}, v, true)}, 1e-6);
    EXPECT_TRUE(r.passed);
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Mul, IdentityAndGradcheck) {
    Rng rng(9);
    const Tensor x = random_tensor<float>({1, 2, 3, 3}, rng, false);
    const Tensor y = mul(x, Tensor::full(x.shape(), 1.f));
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), std::vector<float>(x.data().begin(), x.data().end()));
    EXPECT_THROW(mul(Tensor::zeros({1, 2}), Tensor::zeros({2, 1})), ShapeError);
    const auto r = gradcheck([](const std::vector<DoubleTensor>& in) { return mul(in[0], in[1]); },
                             {random_tensor<double>({2, 2, 3, 3}, rng), random_tensor<double>({2, 2, 3, 3}, rng)}, 1e-4);
    EXPECT_TRUE(r.passed);
}

TEST(Mul, SameTensorTwice) {
    const DoubleTensor x = DoubleTensor::from({1, 1, 1, 2}, {3.0, -2.0}, true);
    const DoubleTensor y = mul(x, x);
    y.backward(std::vector<double>{1.0, 1.0});
    EXPECT_EQ(x.grad()[0], 6.0);
    EXPECT_EQ(x.grad()[1], -4.0);
}

TEST(Concat, SliceRecoversInputs) {
    Rng rng(10);
    const Tensor a = random_tensor<float>({2, 1, 3, 3}, rng, false);
    const Tensor b = random_tensor<float>({2, 3, 3, 3}, rng, false);
    const Tensor c = concat_channels<float>({a, b});
    EXPECT_EQ(c.shape(), (Shape{2, 4, 3, 3}));
    const Tensor a2 = slice_channels(c, 0, 1);
    const Tensor b2 = slice_channels(c, 1, 3);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
    EXPECT_TRUE(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));
    EXPECT_THROW(concat_channels<float>({a, Tensor::zeros({2, 1, 3, 4})}), ShapeError);
    EXPECT_THROW(slice_channels(c, 3, 2), ShapeError);
}

TEST(Concat, Gradcheck) {
    Rng rng(11);
    const auto r = gradcheck(
        [](const std::vector<DoubleTensor>& in) { return concat_channels<double>({in[0], in[1], in[0]}); },
        {random_tensor<double>({2, 2, 3, 3}, rng), random_tensor<double>({2, 1, 3, 3}, rng)}, 1e-4);
    EXPECT_TRUE(r.passed);
    const auto s = gradcheck([](const std::vector<DoubleTensor>& in) { return slice_channels(in[0], 1, 2); },
                             {random_tensor<double>({2, 4, 3, 3}, rng)}, 1e-4);
    EXPECT_TRUE(s.passed);
}

TEST(Softmax, UniformAndNormalized) {
    const Tensor p = softmax_channels(Tensor::zeros({1, 2, 2, 2}));
    for (float v : p.data()) EXPECT_EQ(v, 0.5f);
    Rng rng(12);
    const Tensor q = softmax_channels(random_tensor<float>({3, 4, 5, 5}, rng, false, -30, 30));
    for (int s = 0; s < 3; ++s)
        for (int i = 0; i < 25; ++i) {
            double sum = 0;
            for (int c = 0; c < 4; ++c) sum += q.data()[(s * 4 + c) * 25 + i];
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
}

TEST(Softmax, Gradcheck) {
    Rng rng(13);
    const auto r = gradcheck([](const std::vector<DoubleTensor>& in) { return softmax_channels(in[0]); },
                             {random_tensor<double>({2, 3, 3, 4}, rng, true, -2, 2)}, 1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(WeightedCe, HandEvaluated) {
    // single valid moving pixel at probability 0.5
    const std::vector<std::uint8_t> target{1, 0}, valid{1, 0};
    const std::vector<double> w{1.475, 14.78};
    const Tensor loss = weighted_ce<float>(Tensor::zeros({1, 2, 1, 2}), target, w, valid);
    EXPECT_NEAR(loss.item(), 14.78 * std::log(2.0), 1e-5);
    EXPECT_NEAR(loss.item(), 10.24, 5e-3);
}

TEST(WeightedCe, PerfectPredictionNearZero) {
    const std::vector<std::uint8_t> target{0, 1}, valid{1, 1};
    const std::vector<double> w{1.0, 1.0};
    const Tensor loss = weighted_ce<float>(Tensor::from({1, 2, 1, 2}, {40.f, -40.f, -40.f, 40.f}), target, w, valid);
    EXPECT_LT(loss.item(), 1e-20);
}

TEST(WeightedCe, InvalidPixelsIgnoredAndMean) {
    Rng rng(14);
    const Tensor logits = random_tensor<float>({2, 2, 2, 2}, rng, false, -3, 3);
    const std::vector<std::uint8_t> target{0, 1, 1, 0, 1, 1, 0, 0};
    const std::vector<std::uint8_t> valid{1, 0, 1, 1, 0, 0, 1, 0};
    const std::vector<double> w{0.7, 3.0};
    double ref = 0.0;
    int count = 0;
    for (int s = 0; s < 2; ++s)
        for (int i = 0; i < 4; ++i) {
            const int pix = s * 4 + i;
            if (!valid[pix]) continue;
            const double l0 = logits.data()[(s * 2) * 4 + i], l1 = logits.data()[(s * 2 + 1) * 4 + i];
            const double m = std::max(l0, l1);
            const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
            ref += -w[target[pix]] * ((target[pix] ? l1 : l0) - lse);
            ++count;
        }
    EXPECT_NEAR(weighted_ce<float>(logits, target, w, valid).item(), ref / count, 1e-5);
}

TEST(WeightedCe, NoValidPixels) {
    const std::vector<std::uint8_t> target(4, 0), valid(4, 0);
    const std::vector<double> w{1, 1};
    EXPECT_THROW(weighted_ce<float>(Tensor::zeros({1, 2, 2, 2}), target, w, valid), UndefinedLossError);
}

TEST(WeightedCe, Gradcheck) {
    Rng rng(15);
    std::vector<std::uint8_t> target(2 * 3 * 3), valid(2 * 3 * 3);
    for (auto& t : target) t = static_cast<std::uint8_t>(rng.below(2));
    for (auto& v : valid) v = rng.uniform() < 0.7;
    const std::vector<double> w{1.2, 9.5};
    const auto r = gradcheck(
        [&](const std::vector<DoubleTensor>& in) { return weighted_ce<double>(in[0], target, w, valid); },
        {random_tensor<double>({2, 2, 3, 3}, rng, true, -2, 2)}, 1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Gradcheck, CorruptedBackwardFails) {
    Rng rng(16);
    const GradFn bad = [](const std::vector<DoubleTensor>& in) {
        const DoubleTensor& x = in[0];
        Buffer<double> out(x.data().begin(), x.data().end());
        for (auto& v : out) v = v * v;
        return make_result<double>(x.shape(), std::move(out), {x}, [x](Node<double>& self) {
            auto* p = x.node();
            p->ensure_grad();
            // wrong: should be 2x
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += 3.0 * p->data[i] * self.grad[i];
        });
    };
    const auto r = gradcheck(bad, {random_tensor<double>({1, 1, 3, 3}, rng)}, 1e-4);
    EXPECT_FALSE(r.passed);
    EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(Backward, ReverseOrderWithSharedSubgraph) {
    // y = relu(x) ⊙ relu(x) + concat path reuse; compare with closed form 2x for x > 0
    const DoubleTensor x = DoubleTensor::from({1, 1, 1, 3}, {0.5, -1.0, 2.0}, true);
    const DoubleTensor r = relu(x);
    const DoubleTensor y = mul(r, r);
    y.backward(std::vector<double>{1, 1, 1});
    EXPECT_EQ(x.grad()[0], 1.0);
    EXPECT_EQ(x.grad()[1], 0.0);
    EXPECT_EQ(x.grad()[2], 4.0);
}

TEST(NoGrad, RecordsNoHistory) {
    Tensor x = Tensor::full({1, 1, 2, 2}, 1.f, true);
    NoGradGuard guard;
    const Tensor y = relu(x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Adam, ZeroGradientLeavesParams) {
    std::vector<Tensor> p{Tensor::from({3}, {1.f, -2.f, 3.f}, true)};
    p[0].grad_storage().assign(3, 0.f);
    AdamState st;
    adam_step(p, st, AdamConfig{});
    EXPECT_EQ(p[0].storage(), (Buffer<float>{1.f, -2.f, 3.f}));
}

TEST(Adam, FirstStepIsLrTimesSign) {
    std::vector<Tensor> p{Tensor::from({3}, {1.f, 1.f, 1.f}, true)};
    p[0].grad_storage() = {0.3f, -5.f, 1e-3f};
    AdamState st;
    AdamConfig cfg;
    adam_step(p, st, cfg);
    // m̂ = g, v̂ = g², step = lr·g/(|g|+eps)
    const float g[3] = {0.3f, -5.f, 1e-3f};
    for (int i = 0; i < 3; ++i) {
        const double expect = 1.0 - cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
        EXPECT_NEAR(p[0].storage()[i], expect, 1e-6);
    }
    EXPECT_EQ(st.step, 1);
}

TEST(Adam, MatchesReferenceOverSteps) {
    Rng rng(17);
    std::vector<Tensor> p{Tensor::from({4}, {0.1f, 0.2f, -0.3f, 0.4f}, true)};
    std::vector<double> ref(p[0].storage().begin(), p[0].storage().end()), m(4, 0), v(4, 0);
    AdamState st;
    AdamConfig cfg;
    for (int t = 1; t <= 5; ++t) {
        std::vector<float> g(4);
        for (auto& x : g) x = static_cast<float>(rng.normal());
        p[0].grad_storage().assign(g.begin(), g.end());
        adam_step(p, st, cfg);
        for (int i = 0; i < 4; ++i) {
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(cfg.beta1, t)), vh = v[i] / (1 - std::pow(cfg.beta2, t));
            ref[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        }
    }
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[0].storage()[i], ref[i], 1e-6);
}

TEST(Determinism, ForwardBackwardBitIdentical) {
    auto run = [] {
        Rng rng(18);
        const Tensor x = random_tensor<float>({2, 3, 8, 8}, rng);
        const Tensor w = random_tensor<float>({4, 3, 5, 5}, rng);
        const Tensor b = random_tensor<float>({4}, rng);
        const Tensor y = maxpool2(relu(conv2d(x, w, b, 2)));
        const std::vector<std::uint8_t> valid(2 * 4 * 4, 1);
        std::vector<std::uint8_t> target(2 * 4 * 4, 0);
        const std::vector<double> cw{1.0, 2.0};
        const Tensor loss = weighted_ce<float>(slice_channels(y, 0, 2), target, cw, valid);
        loss.backward();
        std::vector<float> out(w.grad().begin(), w.grad().end());
        out.push_back(loss.item());
        return out;
    };
    EXPECT_EQ(run(), run());
}

TEST(Relu, PropagatesNan) {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    const ad::Tensor y = ad::relu(ad::Tensor::from({1, 1, 1, 3}, {-1.f, nan, 2.f}));
    EXPECT_EQ(y.data()[0], 0.f);
    EXPECT_TRUE(std::isnan(y.data()[1]));
    EXPECT_EQ(y.data()[2], 2.f);
}

TEST(MaxPool, PropagatesNan) {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    for (int pos = 0; pos < 4; ++pos) {
        std::vector<float> v{1.f, 5.f, 3.f, 2.f};
        v[static_cast<std::size_t>(pos)] = nan;
        const ad::Tensor y = ad::maxpool2(ad::Tensor::from({1, 1, 2, 2}, v));
        EXPECT_TRUE(std::isnan(y.data()[0])) << pos;
    }
}
