#include "deeptraverse/verify.hpp"

#include <cmath>
#include <functional>
#include <limits>

#include "deeptraverse/blocks.hpp"

namespace dt {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Tensor random_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.normal();
    return t;
}

// Among `attempts` random inputs of `shape`, the one whose relu inputs stay
// farthest from the kink under `run`, so that no central difference
// straddles it.
Tensor pick_probe(Shape shape, Rng& rng, const std::function<void(const Tensor&)>& run, int attempts = 16) {
    Tensor best;
    double best_margin = -1.0;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        Tensor candidate = random_tensor(shape, rng);
        double margin = std::numeric_limits<double>::infinity();
        set_relu_margin_probe(&margin);
        run(candidate);
        set_relu_margin_probe(nullptr);
        if (margin > best_margin) {
            best_margin = margin;
            best = std::move(candidate);
        }
    }
    return best;
}

GradCheckCase check(std::string component, const std::function<Var(Tape&)>& loss, std::vector<Parameter*> params,
                    const GradCheckOptions& options) {
    return {std::move(component), grad_check(loss, params, options)};
}

}  // namespace

void scramble_for_check(std::vector<Parameter*> params, std::vector<BatchNormParams*> bns, Rng& rng,
                        double gamma_low, double gamma_high) {
    for (Parameter* p : params) {
        if (ends_with(p->name, ".gamma")) {
            for (double& v : p->value.values()) v = gamma_low + (gamma_high - gamma_low) * rng.uniform();
        } else if (ends_with(p->name, ".beta") || ends_with(p->name, ".bias") || !p->decay) {
            for (double& v : p->value.values()) v = 0.2 * rng.normal();
        }
    }
    for (BatchNormParams* bn : bns) {
        for (double& v : bn->running_mean.values()) v = 0.1 * rng.normal();
        for (double& v : bn->running_var.values()) v = 0.5 + rng.uniform();
    }
}

std::vector<GradCheckCase> run_gradcheck_suite(const ModelConfig& model_config, std::uint64_t seed,
                                               const GradCheckOptions& options) {
    std::vector<GradCheckCase> out;
    Rng rng(seed);

    for (int r : {0, 1, 3}) {
        BlockOptions o;
        o.in_channels = 4;
        o.out_channels = 8;
        o.stride = 2;
        o.recursion = r;
        o.reduction = 4;
        BlockParams b = make_block("eb", o, rng);
        std::vector<Parameter*> params;
        append_parameters(b.extract, params);
        if (r > 0) append_parameters(b.recursive, params);
        std::vector<BatchNormParams*> bns = {&b.extract.bn1, &b.extract.bn2, &b.recursive.bn1, &b.recursive.bn2};
        scramble_for_check(params, bns, rng);
        const Tensor x = pick_probe(Shape{2, 4, 8, 8}, rng, [&](const Tensor& c) {
            Tape t(false);
            Context ctx{t, Mode::Train, nullptr};
            dfs_eb_forward(ctx, t.input(c), b.extract, b.recursive, r);
        });
        const Tensor weights = random_tensor(Shape{2, 8, 4, 4}, rng);
        out.push_back(check(
            "dfs_eb R=" + std::to_string(r),
            [&](Tape& t) {
                Context ctx{t, Mode::Train, nullptr};
                return ag::weighted_sum(dfs_eb_forward(ctx, t.input(x), b.extract, b.recursive, r), weights);
            },
            params, options));
    }

    {
        BacktrackParams bb = make_backtrack("bb", 8, 4, 1, rng);
        std::vector<Parameter*> params;
        append_parameters(bb, params);
        scramble_for_check(params, {}, rng);
        Parameter input{"input",
                        pick_probe(Shape{2, 8, 5, 5}, rng,
                                   [&](const Tensor& c) {
                                       Tape t(false);
                                       Context ctx{t, Mode::Train, nullptr};
                                       dfs_bb_forward(ctx, t.input(c), bb);
                                   }),
                        false};
        const Tensor weights = random_tensor(Shape{2, 8, 5, 5}, rng);
        params.push_back(&input);
        out.push_back(check(
            "dfs_bb",
            [&](Tape& t) {
                Context ctx{t, Mode::Train, nullptr};
                return ag::weighted_sum(dfs_bb_forward(ctx, t.param(input), bb), weights);
            },
            params, options));
    }

    for (const bool projection : {false, true}) {
        BlockOptions o;
        o.in_channels = projection ? 4 : 8;
        o.out_channels = 8;
        o.stride = projection ? 2 : 1;
        o.recursion = 2;
        o.reduction = 4;
        BlockParams b = make_block("block", o, rng);
        std::vector<Parameter*> params;
        append_parameters(b, params);
        std::vector<BatchNormParams*> bns;
        append_batchnorms(b, bns);
        scramble_for_check(params, bns, rng);
        const Tensor x = pick_probe(Shape{2, o.in_channels, 8, 8}, rng, [&](const Tensor& c) {
            Tape t(false);
            Context ctx{t, Mode::Train, nullptr};
            dfs_block_forward(ctx, t.input(c), b);
        });
        const Index side = projection ? 4 : 8;
        const Tensor weights = random_tensor(Shape{2, 8, side, side}, rng);
        out.push_back(check(
            projection ? "dfs_block projection" : "dfs_block identity",
            [&](Tape& t) {
                Context ctx{t, Mode::Train, nullptr};
                return ag::weighted_sum(dfs_block_forward(ctx, t.input(x), b), weights);
            },
            params, options));
    }

    {
        Model m = build_model(model_config, seed);
        scramble_for_check(m.parameters(), {}, rng, 0.5, 1.0);
        const Shape image{model_config.input_channels, model_config.input_height, model_config.input_width};
        // Running statistics from one training pass over a separate
        // calibration batch keep inference activations near unit scale.
        for (BatchNormParams* bn : m.batchnorms()) bn->momentum = 1.0;
        {
            Tape tape(false);
            Rng drop(seed);
            Context ctx{tape, Mode::Train, &drop};
            forward(ctx, m, tape.input(random_tensor(Shape{32, image[0], image[1], image[2]}, rng)));
        }
        for (BatchNormParams* bn : m.batchnorms()) bn->momentum = 0.1;

        const Tensor x =
            pick_probe(Shape{2, image[0], image[1], image[2]}, rng, [&](const Tensor& c) { infer(m, c); }, 64);

        // Unit-scale logits keep the softmax away from saturation, where
        // gradients fall below the finite-difference noise floor.
        {
            const Tensor logits = infer(m, x);
            double sq = 0.0;
            for (double v : logits.values()) sq += v * v;
            const double scale = std::sqrt(sq / static_cast<double>(logits.numel()));
            if (scale > 0.0) {
                for (double& v : m.head_weight.value.values()) v /= scale;
            }
        }
        const std::vector<int> labels = {0, static_cast<int>(model_config.num_classes - 1)};
        out.push_back(check(
            "model",
            [&](Tape& t) {
                Context ctx{t, Mode::Infer, nullptr};
                return ag::softmax_cross_entropy(forward(ctx, m, t.input(x)), labels);
            },
            m.parameters(), options));
    }
    return out;
}

}  // namespace dt
