#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "criteria.hpp"
#include "deeptraverse/errors.hpp"
#include "deeptraverse/kernels.hpp"
#include "deeptraverse/layers.hpp"
#include "deeptraverse/rng.hpp"
#include "deeptraverse/tensor.hpp"
#include "oracle.hpp"

namespace dt {
namespace {

Tensor randn(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

Tensor iota_plane() { return Tensor(Shape{1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}); }

TEST(Tensor, ShapeInvariants) {
    Tensor t(Shape{2, 3, 4, 5});
    EXPECT_EQ(t.numel(), 120);
    EXPECT_EQ(t.shape().numel(), t.numel());
    EXPECT_THROW(Tensor(Shape{2, 0, 3}), ConfigError);
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ConfigError);
    EXPECT_THROW(t.reshaped(Shape{7}), ConfigError);
    EXPECT_EQ(t.reshaped(Shape{6, 20}).shape(), (Shape{6, 20}));
    EXPECT_THROW(t.item(), InputError);
    EXPECT_DOUBLE_EQ(Tensor::scalar(3.5).item(), 3.5);
}

TEST(Tensor, BuffersAreAligned) {
    for (Index n : {1, 3, 17, 1000}) {
        const Tensor t(Shape{n});
        EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data()) % 64, 0u);
    }
}

TEST(Conv2d, IdentityKernelOnSinglePixel) {
    const Tensor x(Shape{1, 1, 1, 1}, 5.0);
    Tensor w(Shape{1, 1, 3, 3});
    w.at(0, 0, 1, 1) = 1.0;
    const ConvSpec spec{1, 1, 1};
    EXPECT_EQ(conv2d(x, w, nullptr, spec)[0], 5.0);
    EXPECT_EQ(oracle::conv2d(x, w, nullptr, spec)[0], 5.0);
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
    Rng rng(3);
    const Tensor x(Shape{2, 4, 7, 5});
    const Tensor w = randn(Shape{6, 4, 3, 3}, rng);
    const Tensor y = conv2d(x, w, nullptr, ConvSpec{2, 1, 1});
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, AllOnesDepthwiseSums) {
    const Tensor w(Shape{1, 1, 3, 3}, 1.0);
    const ConvSpec spec{1, 1, 1};
    for (const Tensor& y : {conv2d(iota_plane(), w, nullptr, spec), oracle::conv2d(iota_plane(), w, nullptr, spec)}) {
        EXPECT_EQ(y.at(0, 0, 1, 1), 45.0);
        EXPECT_EQ(y.at(0, 0, 0, 0), 12.0);
    }
}

TEST(Conv2d, MatchesOracleOnSpecShapes) {
    Rng rng(11);
    const Tensor x = randn(Shape{2, 4, 8, 8}, rng);
    const Tensor dw = randn(Shape{4, 1, 3, 3}, rng);
    EXPECT_LT(max_abs_diff(conv2d(x, dw, nullptr, ConvSpec{1, 1, 4}), oracle::conv2d(x, dw, nullptr, ConvSpec{1, 1, 4})),
              1e-10);
    const Tensor pw = randn(Shape{6, 4, 1, 1}, rng);
    EXPECT_LT(max_abs_diff(conv2d(x, pw, nullptr, ConvSpec{2, 0, 1}), oracle::conv2d(x, pw, nullptr, ConvSpec{2, 0, 1})),
              1e-10);
}

TEST(Conv2d, OutputExtentArithmetic) {
    EXPECT_EQ(conv2d_output_shape(Shape{1, 3, 32, 32}, Shape{8, 3, 3, 3}, ConvSpec{2, 1, 1}), (Shape{1, 8, 16, 16}));
    EXPECT_EQ(conv2d_output_shape(Shape{1, 4, 7, 9}, Shape{4, 1, 5, 5}, ConvSpec{1, 0, 4}), (Shape{1, 4, 3, 5}));
}

TEST(Conv2d, ShapeErrorsAreConfigErrors) {
    const Tensor x(Shape{1, 4, 5, 5});
    EXPECT_THROW(conv2d(x, Tensor(Shape{2, 3, 3, 3}), nullptr, ConvSpec{}), ConfigError);      // channel mismatch
    EXPECT_THROW(conv2d(x, Tensor(Shape{2, 4, 7, 7}), nullptr, ConvSpec{}), ConfigError);      // kernel too large
    EXPECT_THROW(conv2d(x, Tensor(Shape{2, 4, 3, 3}), nullptr, ConvSpec{0, 0, 1}), ConfigError);  // stride 0
    EXPECT_THROW(conv2d(x, Tensor(Shape{2, 4, 3, 3}), nullptr, ConvSpec{1, -1, 1}), ConfigError);
    EXPECT_THROW(conv2d(x, Tensor(Shape{3, 2, 3, 3}), nullptr, ConvSpec{1, 1, 2}), ConfigError);  // groups
    try {
        conv2d(x, Tensor(Shape{2, 3, 3, 3}), nullptr, ConvSpec{});
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
    }
}

TEST(Conv2d, Linearity) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = randn(Shape{2, 6, 7, 7}, rng), y = randn(Shape{2, 6, 7, 7}, rng);
        const Tensor w = randn(Shape{6, 3, 3, 3}, rng);
        const ConvSpec spec{1 + trial % 2, 1, 2};
        const double a = rng.normal(), b = rng.normal();
        Tensor mix(x.shape());
        for (Index i = 0; i < x.numel(); ++i) mix[i] = a * x[i] + b * y[i];
        const Tensor cx = conv2d(x, w, nullptr, spec), cy = conv2d(y, w, nullptr, spec);
        const Tensor cm = conv2d(mix, w, nullptr, spec);
        for (Index i = 0; i < cm.numel(); ++i) EXPECT_NEAR(cm[i], a * cx[i] + b * cy[i], 1e-10);
    }
}

TEST(Conv2d, GroupsNeverMix) {
    Rng rng(9);
    Tensor x = randn(Shape{1, 4, 5, 5}, rng);
    const Tensor w = randn(Shape{4, 2, 3, 3}, rng);
    const ConvSpec spec{1, 1, 2};
    const Tensor before = conv2d(x, w, nullptr, spec);
    for (Index i = 0; i < 25; ++i) x[2 * 25 + i] += 1.0;  // perturb channel 2 (group 1)
    const Tensor after = conv2d(x, w, nullptr, spec);
    for (Index i = 0; i < 2 * 25; ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(OracleEquivalence, HundredCasesPerKernel) {
    for (const auto& k : criteria::oracle_equivalence(100, 2024)) {
        EXPECT_EQ(k.cases, 100);
        EXPECT_LT(k.max_abs_diff, 1e-10) << k.kernel;
    }
}

TEST(BatchNorm, InferenceIdentityStatistics) {
    const Tensor x(Shape{1, 1, 1, 1}, 3.0);
    const Tensor y = batchnorm2d_infer(x, Tensor(Shape{1}, 1.0), Tensor(Shape{1}), Tensor(Shape{1}), Tensor(Shape{1}, 1.0), 1e-5);
    EXPECT_NEAR(y[0], 3.0 / std::sqrt(1.0 + 1e-5), 1e-15);
    EXPECT_NEAR(y[0], 2.999985, 1e-6);
}

TEST(BatchNorm, TrainingTwoValues) {
    const Tensor x(Shape{2, 1, 1, 1}, std::vector<double>{0.0, 2.0});
    BatchStats st;
    const Tensor y = batchnorm2d_train(x, Tensor(Shape{1}, 1.0), Tensor(Shape{1}), 1e-5, st);
    EXPECT_DOUBLE_EQ(st.mean[0], 1.0);
    EXPECT_DOUBLE_EQ(st.var[0], 1.0);
    EXPECT_NEAR(y[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
    EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    Rng rng(2);
    const Tensor x = randn(Shape{3, 2, 4, 4}, rng, 10.0);
    const Tensor beta(Shape{2}, std::vector<double>{0.25, -1.5});
    const Tensor y = batchnorm2d_infer(x, Tensor(Shape{2}), beta, randn(Shape{2}, rng), Tensor(Shape{2}, 2.0), 1e-5);
    for (Index n = 0; n < 3; ++n)
        for (Index c = 0; c < 2; ++c)
            for (Index i = 0; i < 16; ++i) EXPECT_EQ(y[(n * 2 + c) * 16 + i], beta[c]);
}

TEST(BatchNorm, TrainingOutputIsStandardized) {
    Rng rng(4);
    const Tensor x = randn(Shape{4, 3, 5, 5}, rng, 7.0);
    BatchStats st;
    const double eps = 1e-5;
    const Tensor y = batchnorm2d_train(x, Tensor(Shape{3}, 1.0), Tensor(Shape{3}), eps, st);
    for (Index c = 0; c < 3; ++c) {
        double mean = 0.0, sq = 0.0;
        for (Index n = 0; n < 4; ++n)
            for (Index i = 0; i < 25; ++i) mean += y[(n * 3 + c) * 25 + i];
        mean /= 100.0;
        for (Index n = 0; n < 4; ++n)
            for (Index i = 0; i < 25; ++i) sq += std::pow(y[(n * 3 + c) * 25 + i] - mean, 2);
        EXPECT_LT(std::abs(mean), 1e-8);
        EXPECT_NEAR(sq / 100.0, st.var[c] / (st.var[c] + eps), 1e-6);
    }
}

TEST(BatchNorm, InferenceIsPerChannelAffine) {
    Rng rng(8);
    const Tensor g = randn(Shape{2}, rng), b = randn(Shape{2}, rng), m = randn(Shape{2}, rng);
    const Tensor v(Shape{2}, 0.7);
    const Tensor x1 = randn(Shape{1, 2, 3, 3}, rng);
    Tensor x2(Shape{2, 2, 3, 3});
    for (Index i = 0; i < 18; ++i) x2[i] = x1[i];
    for (Index i = 18; i < 36; ++i) x2[i] = 100.0 * rng.normal();
    const Tensor y1 = batchnorm2d_infer(x1, g, b, m, v, 1e-5);
    const Tensor y2 = batchnorm2d_infer(x2, g, b, m, v, 1e-5);
    for (Index i = 0; i < 18; ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(BatchNorm, LayerUpdatesRunningStatistics) {
    BatchNormParams p = make_batchnorm("bn", 1);
    const Tensor x(Shape{2, 1, 1, 1}, std::vector<double>{0.0, 2.0});
    batchnorm2d(x, p, Mode::Train);
    EXPECT_DOUBLE_EQ(p.running_mean[0], 0.1);
    EXPECT_DOUBLE_EQ(p.running_var[0], 0.9 + 0.1 * 1.0);
    EXPECT_THROW(batchnorm2d(Tensor(Shape{1, 2, 1, 1}), p, Mode::Infer), ConfigError);
}

TEST(Relu, Examples) {
    const Tensor y = relu(Tensor(Shape{3}, std::vector<double>{-1, 0, 2}));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_EQ(y[1], 0.0);
    EXPECT_EQ(y[2], 2.0);
    Rng rng(1);
    Tensor neg(Shape{50});
    for (double& v : neg.values()) v = -1.0 - rng.uniform();
    const Tensor rn = relu(neg);
    for (double v : rn.values()) EXPECT_EQ(v, 0.0);
    const Tensor x = randn(Shape{200}, rng);
    EXPECT_TRUE(bit_equal(relu(relu(x)), relu(x)));
}

TEST(Sigmoid, Examples) {
    EXPECT_EQ(sigmoid(Tensor(Shape{1}, 0.0))[0], 0.5);
    const double s20 = sigmoid(Tensor(Shape{1}, 20.0))[0];
    EXPECT_GT(s20, 1.0 - 1e-8);
    EXPECT_LT(s20, 1.0);
    Rng rng(6);
    const Tensor x = randn(Shape{500}, rng, 10.0);
    Tensor neg(x.shape());
    for (Index i = 0; i < x.numel(); ++i) neg[i] = -x[i];
    const Tensor a = sigmoid(x), b = sigmoid(neg);
    for (Index i = 0; i < x.numel(); ++i) EXPECT_NEAR(a[i] + b[i], 1.0, 1e-12);
}

TEST(Sigmoid, NoOverflowAtExtremes) {
    const Tensor y = sigmoid(Tensor(Shape{4}, std::vector<double>{-1000.0, -745.0, 745.0, 1000.0}));
    EXPECT_TRUE(y.all_finite());
    for (double v : y.values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_EQ(y[3], 1.0 - 0x1.0p-53);
}

TEST(Dropout, RateZeroAndInferenceAreIdentity) {
    Rng rng(1);
    const Tensor x = randn(Shape{2, 3, 4, 4}, rng);
    std::vector<std::uint8_t> mask;
    EXPECT_TRUE(bit_equal(dropout(x, 0.0, Mode::Train, rng, mask), x));
    EXPECT_TRUE(bit_equal(dropout(x, 0.0, Mode::Infer, rng, mask), x));
    EXPECT_TRUE(bit_equal(dropout(x, 0.5, Mode::Infer, rng, mask), x));
    EXPECT_THROW(dropout(x, 1.0, Mode::Train, rng, mask), ConfigError);
}

TEST(Dropout, InvertedScalingPreservesMean) {
    Rng rng(12345);
    const Tensor x(Shape{1, 1, 400, 500}, 1.0);
    std::vector<std::uint8_t> mask;
    const Tensor y = dropout(x, 0.5, Mode::Train, rng, mask);
    double mean = 0.0;
    Index zeros = 0;
    for (double v : y.values()) {
        mean += v;
        if (v == 0.0) ++zeros;
        else EXPECT_EQ(v, 2.0);
    }
    mean /= static_cast<double>(y.numel());
    EXPECT_NEAR(mean, 1.0, 0.02);
    EXPECT_GT(zeros, 0);
}

TEST(Pool, Examples) {
    const Tensor x(Shape{1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7});
    EXPECT_EQ(adaptive_avg_pool_1x1(x)[0], 4.0);
    const Tensor c(Shape{2, 3, 5, 7}, 0.3);
    const Tensor pc = adaptive_avg_pool_1x1(c);
    for (double v : pc.values()) EXPECT_EQ(v, 0.3);
    Rng rng(3);
    const Tensor p = randn(Shape{2, 3, 1, 1}, rng);
    EXPECT_TRUE(bit_equal(adaptive_avg_pool_1x1(p), p));
}

TEST(ChannelScale, Examples) {
    Rng rng(3);
    const Tensor x = randn(Shape{1, 2, 3, 3}, rng);
    EXPECT_TRUE(bit_equal(channel_scale(x, Tensor(Shape{1, 2, 1, 1}, 1.0)), x));
    const Tensor z = channel_scale(x, Tensor(Shape{1, 2, 1, 1}));
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
    const Tensor y = channel_scale(x, Tensor(Shape{1, 2, 1, 1}, std::vector<double>{2.0, 0.5}));
    for (Index i = 0; i < 9; ++i) {
        EXPECT_EQ(y[i], 2.0 * x[i]);
        EXPECT_EQ(y[9 + i], 0.5 * x[9 + i]);
    }
    EXPECT_THROW(channel_scale(x, Tensor(Shape{1, 3, 1, 1})), ConfigError);
}

TEST(Add, Examples) {
    Rng rng(3);
    const Tensor a = randn(Shape{2, 3, 4, 4}, rng), b = randn(Shape{2, 3, 4, 4}, rng);
    EXPECT_TRUE(bit_equal(add(a, Tensor(a.shape())), a));
    Tensor neg(a.shape());
    for (Index i = 0; i < a.numel(); ++i) neg[i] = -a[i];
    const Tensor z = add(a, neg);
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(bit_equal(add(a, b), add(b, a)));
    EXPECT_THROW(add(a, Tensor(Shape{2, 3, 4, 5})), ConfigError);
}

TEST(SoftmaxCrossEntropy, Examples) {
    const Tensor uniform(Shape{3, 10}, 0.7);
    const std::vector<int> labels = {0, 4, 9};
    EXPECT_NEAR(softmax_cross_entropy(uniform, labels), std::log(10.0), 1e-12);
    Tensor peaked(Shape{1, 10});
    peaked[3] = 100.0;
    const std::vector<int> three = {3};
    EXPECT_LT(softmax_cross_entropy(peaked, three), 1e-8);
    EXPECT_GE(softmax_cross_entropy(peaked, three), 0.0);
    const std::vector<int> bad = {10};
    EXPECT_THROW(softmax_cross_entropy(peaked, bad), InputError);
    const std::vector<int> negative = {-1};
    EXPECT_THROW(softmax_cross_entropy(peaked, negative), InputError);
}

TEST(SoftmaxCrossEntropy, ShiftInvariantAndNonNegative) {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor logits = randn(Shape{4, 6}, rng, 4.0);
        std::vector<int> labels(4);
        for (int& l : labels) l = static_cast<int>(rng.below(6));
        Tensor shifted = logits;
        for (Index r = 0; r < 4; ++r) {
            const double c = 50.0 * rng.normal();
            for (Index j = 0; j < 6; ++j) shifted[r * 6 + j] += c;
        }
        const double a = softmax_cross_entropy(logits, labels);
        EXPECT_GE(a, 0.0);
        EXPECT_NEAR(a, softmax_cross_entropy(shifted, labels), 1e-12);
    }
}

TEST(Kernels, FiniteInputsGiveFiniteOutputs) {
    Rng rng(10);
    const Tensor x = randn(Shape{2, 4, 6, 6}, rng, 100.0);
    const Tensor w = randn(Shape{4, 1, 3, 3}, rng);
    BatchStats st;
    EXPECT_TRUE(conv2d(x, w, nullptr, ConvSpec{1, 1, 4}).all_finite());
    EXPECT_TRUE(batchnorm2d_train(x, Tensor(Shape{4}, 1.0), Tensor(Shape{4}), 1e-5, st).all_finite());
    EXPECT_TRUE(sigmoid(x).all_finite());
    EXPECT_TRUE(adaptive_avg_pool_1x1(x).all_finite());
}

TEST(Rng, StateRoundTrip) {
    Rng a(99);
    for (int i = 0; i < 10; ++i) a.normal();
    Rng b;
    b.set_state(a.state());
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
    EXPECT_LT(a.below(7), 7u);
    EXPECT_THROW(b.set_state("not a state"), FormatError);
}

}  // namespace
}  // namespace dt
