#include <gtest/gtest.h>

#include <cmath>

#include "criteria.hpp"
#include "deeptraverse/autograd.hpp"
#include "deeptraverse/blocks.hpp"
#include "deeptraverse/errors.hpp"
#include "deeptraverse/verify.hpp"

namespace dt {
namespace {

Tensor randn(Shape s, Rng& rng) {
    Tensor t(std::move(s));
    for (double& v : t.values()) v = rng.normal();
    return t;
}

TEST(Backward, SumGivesOnes) {
    Rng rng(1);
    Parameter x{"x", randn(Shape{2, 3, 4, 5}, rng)};
    Tape t;
    const Gradients g = t.backward(ag::sum(t.param(x)));
    ASSERT_EQ(g.at(&x).shape(), x.value.shape());
    for (double v : g.at(&x).values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ReluSubgradient) {
    Parameter x{"x", Tensor(Shape{3}, std::vector<double>{-1.0, 2.0, 0.0})};
    Tape t;
    const Gradients g = t.backward(ag::sum(ag::relu(t.param(x))));
    EXPECT_EQ(g.at(&x)[0], 0.0);
    EXPECT_EQ(g.at(&x)[1], 1.0);
    EXPECT_EQ(g.at(&x)[2], 0.0);
}

TEST(Backward, ChannelScaleGradientIsPlaneSum) {
    Rng rng(2);
    const Tensor a = randn(Shape{2, 3, 4, 4}, rng);
    Parameter s{"s", randn(Shape{2, 3, 1, 1}, rng)};
    Tape t;
    const Gradients g = t.backward(ag::sum(ag::channel_scale(t.input(a), t.param(s))));
    for (Index nc = 0; nc < 6; ++nc) {
        double plane = 0.0;
        for (Index i = 0; i < 16; ++i) plane += a[nc * 16 + i];
        EXPECT_NEAR(g.at(&s)[nc], plane, 1e-12);
    }
}

TEST(Backward, FanOutAccumulates) {
    Rng rng(3);
    Parameter x{"x", randn(Shape{1, 2, 3, 3}, rng)};
    Tape t;
    const Var v = t.param(x);
    const Gradients g = t.backward(ag::sum(ag::add(ag::add(v, v), v)));
    for (double d : g.at(&x).values()) EXPECT_EQ(d, 3.0);
}

TEST(Backward, NonScalarLossIsInputError) {
    Parameter x{"x", Tensor(Shape{2}, 1.0)};
    Tape t;
    EXPECT_THROW(t.backward(t.param(x)), InputError);
}

TEST(Backward, SecondBackwardIsAnError) {
    Parameter x{"x", Tensor(Shape{2}, 1.0)};
    Tape t;
    const Var loss = ag::sum(t.param(x));
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), InputError);
}

TEST(Backward, VarFromAnotherTapeIsInternalError) {
    Parameter x{"x", Tensor(Shape{2}, 1.0)};
    Tape a, b;
    const Var loss = ag::sum(a.param(x));
    EXPECT_THROW(b.backward(loss), InternalError);
}

TEST(Backward, GradientShapesMatchValues) {
    Rng rng(4);
    BlockOptions o;
    o.in_channels = 4;
    o.out_channels = 8;
    o.stride = 2;
    o.recursion = 2;
    o.reduction = 4;
    BlockParams b = make_block("b", o, rng);
    std::vector<Parameter*> params;
    append_parameters(b, params);
    Tape t;
    Context ctx{t, Mode::Train, nullptr};
    const Var x = t.input(randn(Shape{2, 4, 6, 6}, rng), true);
    const Gradients g = t.backward(ag::sum(dfs_block_forward(ctx, x, b)));
    EXPECT_EQ(g.size(), params.size());
    for (Parameter* p : params) EXPECT_EQ(g.at(p).shape(), p->value.shape()) << p->name;
    EXPECT_EQ(t.grad(x).shape(), x.shape());
}

TEST(Backward, NonRecordingTapeKeepsNothing) {
    Parameter x{"x", Tensor(Shape{4}, 1.0)};
    Tape t(false);
    const Var y = ag::relu(t.param(x));
    EXPECT_EQ(y.value().numel(), 4);
    EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, QuadraticIsExact) {
    Rng rng(5);
    // Few coordinates of magnitude ~1: the rounding of f itself, about
    // ulp(f) / 2h, must stay below 1e-9 of every gradient.
    Parameter p{"theta", Tensor(Shape{8})};
    for (double& v : p.value.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform());
    const GradCheckReport r = grad_check([&](Tape& t) { return ag::sum(ag::mul(t.param(p), t.param(p))); }, {&p});
    EXPECT_TRUE(r.failure.empty());
    EXPECT_LT(r.max_rel_error, 1e-9);
    ASSERT_EQ(r.entries.size(), 1u);
    EXPECT_EQ(r.entries[0].checked, 8);
}

TEST(GradCheck, ChecksAllCoordinatesOfSmallTensors) {
    Rng rng(6);
    Parameter p{"small", randn(Shape{7}, rng)};
    const GradCheckReport r = grad_check([&](Tape& t) { return ag::sum(ag::sigmoid(t.param(p))); }, {&p});
    EXPECT_EQ(r.entries[0].checked, 7);
    EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradCheck, NonFiniteLossIsReported) {
    Parameter p{"p", Tensor(Shape{3}, 1.0)};
    const GradCheckReport r = grad_check(
        [&](Tape& t) {
            const Var v = t.param(p);
            Tensor big(Shape{3}, std::numeric_limits<double>::infinity());
            return ag::sum(ag::add(v, t.input(big)));
        },
        {&p});
    EXPECT_FALSE(r.failure.empty());
    EXPECT_FALSE(r.passed(1e-4));
}

TEST(GradCheck, SingleBlockRecursionTwo) {
    Rng rng(7);
    BlockOptions o;
    o.in_channels = 8;
    o.out_channels = 8;
    o.recursion = 2;
    o.reduction = 4;
    BlockParams b = make_block("b", o, rng);
    std::vector<Parameter*> params;
    append_parameters(b, params);
    std::vector<BatchNormParams*> bns;
    append_batchnorms(b, bns);
    scramble_for_check(params, bns, rng);
    const Tensor x = randn(Shape{2, 8, 8, 8}, rng);
    const Tensor w = randn(Shape{2, 8, 8, 8}, rng);
    const GradCheckReport r = grad_check(
        [&](Tape& t) {
            Context ctx{t, Mode::Infer, nullptr};
            return ag::weighted_sum(dfs_block_forward(ctx, t.input(x), b), w);
        },
        params);
    EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error;
}

TEST(GradCheck, SuitePassesAtDefaultSeed) {
    const std::vector<GradCheckCase> cases = run_gradcheck_suite(dt_tiny(3, 10, 8), 1);
    ASSERT_EQ(cases.size(), 7u);
    for (const GradCheckCase& c : cases) EXPECT_TRUE(c.report.passed(1e-4)) << c.component << " " << c.report.max_rel_error;
}

TEST(GradCheck, InjectedFaultIsCaught) {
    set_backward_fault("sigmoid");
    const std::vector<GradCheckCase> cases = run_gradcheck_suite(dt_tiny(3, 10, 8), 1);
    set_backward_fault("");
    bool any_failed = false;
    for (const GradCheckCase& c : cases) any_failed = any_failed || !c.report.passed(1e-4);
    EXPECT_TRUE(any_failed);
}

TEST(SharedParameters, GradientIsSumOfCopies) {
    const criteria::UnrollResult r = criteria::unrolling_equivalence(42);
    EXPECT_GT(r.tensors, 0);
    EXPECT_LT(r.forward_diff, 1e-12);
    EXPECT_LT(r.infer_oracle_diff, 1e-12);
    EXPECT_LT(r.grad_diff, 1e-10);
}

}  // namespace
}  // namespace dt
