#pragma once

// Define-by-run reverse-mode differentiation. Every differentiable op
// appends a node holding its output and a backward rule to a Tape; backward()
// walks the tape in reverse execution order. A parameter used several times
// on one tape (the shared recursive branch) is a single leaf node whose
// gradient accumulates over all of its consumers.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deeptraverse/kernels.hpp"
#include "deeptraverse/layers.hpp"
#include "deeptraverse/tensor.hpp"

namespace dt {

class Tape;

// Handle to a value produced on a tape. Cheap to copy.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const;
    bool requires_grad() const { return id_ >= 0; }
    long id() const { return id_; }

private:
    friend class Tape;
    std::shared_ptr<const Tensor> value_;
    Tape* tape_ = nullptr;
    long id_ = -1;
};

using Gradients = std::unordered_map<const Parameter*, Tensor>;

class Tape {
public:
    // grad_out belongs to the node and is discarded afterwards, so a rule may
    // consume it in place.
    using BackwardFn = std::function<void(Tensor& grad_out, Tape& tape)>;

    // A non-recording tape evaluates ops without keeping anything for
    // backward (inference and finite-difference probes).
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    // Leaf for a learnable tensor. Repeated calls with the same parameter
    // return the same node.
    Var param(Parameter& p);
    Var input(Tensor value, bool requires_grad = false);

    // Appends an op result. Not recorded (plain value) when the tape is not
    // recording or no input requires a gradient.
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    // Adds `g` into the gradient slot of `v` (no-op for vars without a slot).
    void accumulate(const Var& v, Tensor&& g);

    // Seeds d loss / d loss = 1 and propagates in reverse order. Returns the
    // gradient of every parameter reachable from the loss. A tape supports a
    // single backward pass; a second call throws InputError.
    Gradients backward(const Var& loss);

    // Gradient of a leaf created with input(..., true), after backward().
    const Tensor& grad(const Var& leaf) const;

private:
    struct Node {
        std::shared_ptr<const Tensor> value;
        std::vector<long> inputs;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool leaf = false;
        Tensor grad;
        bool has_grad = false;
    };

    const Node& node_of(const Var& v) const;
    Var make_var(std::shared_ptr<const Tensor> value, long id);

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, long> param_nodes_;
    bool recording_;
    bool backward_done_ = false;
};

// Differentiable ops. The tape is taken from the first operand.
namespace ag {

Var conv2d(Var x, Var w, std::optional<Var> bias, ConvSpec spec);
Var conv2d(Var x, ConvParams& p);
Var batchnorm2d(Var x, BatchNormParams& p, Mode mode);
Var relu(Var x);
Var sigmoid(Var x);
Var dropout(Var x, double rate, Mode mode, Rng& rng);
Var adaptive_avg_pool_1x1(Var x);
Var channel_scale(Var x, Var s);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var linear(Var x, Var w, std::optional<Var> bias);
Var sum(Var x);
// sum(x * weights) for a constant weight tensor; used to project tensors to
// scalars in gradient checks.
Var weighted_sum(Var x, const Tensor& weights);
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

}  // namespace ag

// Test hook: scales the input-gradient produced by the named op's backward
// rule by (1 + 1e-2). Empty string disables. Used to confirm that gradient
// checks catch a wrong backward rule.
void set_backward_fault(std::string op_name);
const std::string& backward_fault();

// Test hook: while set, every ag::relu lowers *slot to the smallest |input|
// it sees. Null disables. Finite differences are only meaningful when no relu
// input lies within the perturbation's reach of the kink at 0.
void set_relu_margin_probe(double* slot);

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    Index coords_per_tensor = 200;
    std::uint64_t seed = 1234;
};

struct GradCheckEntry {
    std::string name;
    Index checked = 0;
    double max_rel_error = 0.0;
    Index worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    std::string failure;  // set when the function produced a non-finite value

    bool passed(double tolerance) const { return failure.empty() && max_rel_error < tolerance; }
};

// Compares analytic gradients against central differences
// (f(t + h e) - f(t - h e)) / 2h on a random subset of coordinates per
// parameter tensor (all coordinates when the tensor is small). Relative error
// is |a - n| / max(|a|, |n|, 1e-8). `loss` must be deterministic.
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                           const GradCheckOptions& options = {});

}  // namespace dt
