#include "deeptraverse/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deeptraverse/errors.hpp"

namespace dt {

namespace {

std::string& fault_slot() {
    static std::string op;
    return op;
}

void apply_fault(const char* op, Tensor& g) {
    if (fault_slot().empty() || fault_slot() != op) return;
    for (Index i = 0; i < g.numel(); ++i) g[i] *= 1.01;
}

double* relu_margin_slot = nullptr;

}  // namespace

void set_backward_fault(std::string op_name) { fault_slot() = std::move(op_name); }
const std::string& backward_fault() { return fault_slot(); }

void set_relu_margin_probe(double* slot) { relu_margin_slot = slot; }

const Tensor& Var::value() const {
    if (!value_) throw InternalError("access to an empty Var");
    return *value_;
}

Tape& Var::tape() const {
    if (!tape_) throw InternalError("Var is not attached to a tape");
    return *tape_;
}

Var Tape::make_var(std::shared_ptr<const Tensor> value, long id) {
    Var v;
    v.value_ = std::move(value);
    v.tape_ = this;
    v.id_ = id;
    return v;
}

Var Tape::param(Parameter& p) {
    // Non-owning alias: the parameter outlives the tape.
    std::shared_ptr<const Tensor> alias(std::shared_ptr<const Tensor>(), &p.value);
    if (!recording_) return make_var(std::move(alias), -1);
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
        return make_var(nodes_[static_cast<std::size_t>(it->second)].value, it->second);
    }
    Node n;
    n.value = alias;
    n.param = &p;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    const long id = static_cast<long>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    return make_var(std::move(alias), id);
}

Var Tape::input(Tensor value, bool requires_grad) {
    auto ptr = std::make_shared<const Tensor>(std::move(value));
    if (!recording_ || !requires_grad) return make_var(std::move(ptr), -1);
    Node n;
    n.value = ptr;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return make_var(std::move(ptr), static_cast<long>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    auto ptr = std::make_shared<const Tensor>(std::move(value));
    bool any = false;
    for (const Var& in : inputs) {
        if (in.tape_ != this) throw InternalError("op input belongs to a different tape");
        if (in.id_ >= static_cast<long>(nodes_.size())) throw InternalError("op input is not on the tape");
        any = any || in.id_ >= 0;
    }
    if (!recording_ || !any) return make_var(std::move(ptr), -1);
    Node n;
    n.value = ptr;
    n.backward = std::move(backward);
    for (const Var& in : inputs) n.inputs.push_back(in.id_);
    nodes_.push_back(std::move(n));
    return make_var(std::move(ptr), static_cast<long>(nodes_.size()) - 1);
}

const Tape::Node& Tape::node_of(const Var& v) const {
    if (v.tape_ != this || v.id_ < 0 || v.id_ >= static_cast<long>(nodes_.size())) {
        throw InternalError("node is not on this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id_)];
}

void Tape::accumulate(const Var& v, Tensor&& g) {
    if (v.id_ < 0) return;
    node_of(v);
    Node& n = nodes_[static_cast<std::size_t>(v.id_)];
    if (g.shape() != n.value->shape()) {
        throw InternalError("gradient shape " + g.shape().str() + " does not match value shape " +
                            n.value->shape().str());
    }
    if (!n.has_grad) {
        n.grad = std::move(g);
        n.has_grad = true;
    } else {
        add_inplace(n.grad, g);
    }
}

Gradients Tape::backward(const Var& loss) {
    if (loss.tape_ != this) throw InternalError("loss node is not on this tape");
    if (loss.value().numel() != 1) {
        throw InputError("backward: loss must be a scalar, got shape " + loss.value().shape().str());
    }
    if (backward_done_) throw InputError("backward: this tape has already been differentiated");
    backward_done_ = true;
    Gradients grads;
    if (loss.id_ < 0) return grads;
    node_of(loss);
    accumulate(loss, Tensor(loss.value().shape(), 1.0));
    for (long i = loss.id_; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.has_grad) continue;
        if (n.backward) {
            n.backward(n.grad, *this);
            n.backward = nullptr;
        }
        if (!n.leaf) {
            n.grad = Tensor();
            n.has_grad = false;
        } else if (n.param) {
            grads[n.param] = n.grad;
        }
    }
    return grads;
}

const Tensor& Tape::grad(const Var& leaf) const {
    const Node& n = node_of(leaf);
    if (!n.leaf || !n.has_grad) throw InputError("grad: no gradient stored for this node");
    return n.grad;
}

namespace ag {

namespace {

Tape& tape_of(const Var& v) { return v.tape(); }

}  // namespace

Var conv2d(Var x, Var w, std::optional<Var> bias, ConvSpec spec) {
    Tensor out = dt::conv2d(x.value(), w.value(), bias ? &bias->value() : nullptr, spec);
    std::vector<Var> ins{x, w};
    if (bias) ins.push_back(*bias);
    return tape_of(x).record(std::move(out), ins, [x, w, bias, spec](const Tensor& g, Tape& t) {
        if (x.requires_grad()) {
            Tensor gi = conv2d_grad_input(g, w.value(), x.shape(), spec);
            apply_fault("conv2d", gi);
            t.accumulate(x, std::move(gi));
        }
        if (w.requires_grad()) t.accumulate(w, conv2d_grad_weight(g, x.value(), w.shape(), spec));
        if (bias && bias->requires_grad()) t.accumulate(*bias, conv2d_grad_bias(g));
    });
}

Var conv2d(Var x, ConvParams& p) {
    Tape& t = tape_of(x);
    std::optional<Var> b;
    if (p.bias) b = t.param(*p.bias);
    return conv2d(x, t.param(p.weight), b, p.spec);
}

Var batchnorm2d(Var x, BatchNormParams& p, Mode mode) {
    Tape& t = tape_of(x);
    Var gamma = t.param(p.gamma);
    Var beta = t.param(p.beta);
    const Var ins[] = {x, gamma, beta};
    if (mode == Mode::Infer) {
        Tensor out = dt::batchnorm2d(x.value(), p, Mode::Infer);
        // Running statistics are copied: the optimizer step may not touch them,
        // but training-mode passes on a later tape would.
        return t.record(std::move(out), ins,
                        [x, gamma, beta, mean = p.running_mean, var = p.running_var, eps = p.eps](const Tensor& g,
                                                                                                  Tape& tp) {
                            BatchNormGrads bg =
                                batchnorm2d_infer_backward(g, x.value(), gamma.value(), mean, var, eps);
                            apply_fault("batchnorm2d", bg.input);
                            tp.accumulate(x, std::move(bg.input));
                            tp.accumulate(gamma, std::move(bg.gamma));
                            tp.accumulate(beta, std::move(bg.beta));
                        });
    }
    require_nchw(x.value(), "batchnorm2d");
    if (x.value().dim(1) != p.channels()) {
        throw ConfigError("batchnorm2d: input has " + std::to_string(x.value().dim(1)) +
                          " channels, parameters have " + std::to_string(p.channels()));
    }
    BatchStats stats;
    Tensor out = batchnorm2d_train(x.value(), p.gamma.value, p.beta.value, p.eps, stats);
    for (Index c = 0; c < p.channels(); ++c) {
        p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * stats.mean[c];
        p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * stats.var[c];
    }
    return t.record(std::move(out), ins, [x, gamma, beta, stats = std::move(stats)](const Tensor& g, Tape& tp) {
        BatchNormGrads bg = batchnorm2d_train_backward(g, x.value(), gamma.value(), stats);
        apply_fault("batchnorm2d", bg.input);
        tp.accumulate(x, std::move(bg.input));
        tp.accumulate(gamma, std::move(bg.gamma));
        tp.accumulate(beta, std::move(bg.beta));
    });
}

Var relu(Var x) {
    if (relu_margin_slot) {
        for (double v : x.value().values()) *relu_margin_slot = std::min(*relu_margin_slot, std::abs(v));
    }
    Tensor out = dt::relu(x.value());
    // Filled with the output once recorded; the node owns that tensor for as
    // long as the backward rule can run.
    auto output = std::make_shared<const Tensor*>(nullptr);
    const Var ins[] = {x};
    Var y = tape_of(x).record(std::move(out), ins, [x, output](Tensor& g, Tape& t) {
        relu_backward_inplace(g, **output);
        apply_fault("relu", g);
        t.accumulate(x, std::move(g));
    });
    if (y.requires_grad()) *output = &y.value();
    return y;
}

Var sigmoid(Var x) {
    Tensor out = dt::sigmoid(x.value());
    auto output = std::make_shared<const Tensor*>(nullptr);
    const Var ins[] = {x};
    Var y = tape_of(x).record(std::move(out), ins, [x, output](const Tensor& g, Tape& t) {
        Tensor gi = sigmoid_backward(g, **output);
        apply_fault("sigmoid", gi);
        t.accumulate(x, std::move(gi));
    });
    if (y.requires_grad()) *output = &y.value();
    return y;
}

Var dropout(Var x, double rate, Mode mode, Rng& rng) {
    std::vector<std::uint8_t> mask;
    Tensor out = dt::dropout(x.value(), rate, mode, rng, mask);
    const Var ins[] = {x};
    return tape_of(x).record(std::move(out), ins, [x, rate, mask = std::move(mask)](const Tensor& g, Tape& t) {
        Tensor gi = dropout_backward(g, rate, mask);
        apply_fault("dropout", gi);
        t.accumulate(x, std::move(gi));
    });
}

Var adaptive_avg_pool_1x1(Var x) {
    const Var ins[] = {x};
    return tape_of(x).record(dt::adaptive_avg_pool_1x1(x.value()), ins, [x](const Tensor& g, Tape& t) {
        Tensor gi = adaptive_avg_pool_1x1_backward(g, x.shape());
        apply_fault("adaptive_avg_pool_1x1", gi);
        t.accumulate(x, std::move(gi));
    });
}

Var channel_scale(Var x, Var s) {
    const Var ins[] = {x, s};
    return tape_of(x).record(dt::channel_scale(x.value(), s.value()), ins, [x, s](const Tensor& g, Tape& t) {
        if (x.requires_grad()) {
            Tensor gi = channel_scale_grad_x(g, s.value());
            apply_fault("channel_scale", gi);
            t.accumulate(x, std::move(gi));
        }
        if (s.requires_grad()) t.accumulate(s, channel_scale_grad_s(g, x.value()));
    });
}

Var add(Var a, Var b) {
    const Var ins[] = {a, b};
    return tape_of(a).record(dt::add(a.value(), b.value()), ins, [a, b](Tensor& g, Tape& t) {
        if (b.requires_grad()) t.accumulate(b, Tensor(g));
        apply_fault("add", g);
        t.accumulate(a, std::move(g));
    });
}

Var mul(Var a, Var b) {
    const Var ins[] = {a, b};
    return tape_of(a).record(dt::mul(a.value(), b.value()), ins, [a, b](const Tensor& g, Tape& t) {
        if (a.requires_grad()) {
            Tensor ga = dt::mul(g, b.value());
            apply_fault("mul", ga);
            t.accumulate(a, std::move(ga));
        }
        if (b.requires_grad()) t.accumulate(b, dt::mul(g, a.value()));
    });
}

Var linear(Var x, Var w, std::optional<Var> bias) {
    Tensor out = dt::linear(x.value(), w.value(), bias ? &bias->value() : nullptr);
    std::vector<Var> ins{x, w};
    if (bias) ins.push_back(*bias);
    return tape_of(x).record(std::move(out), ins, [x, w, bias](const Tensor& g, Tape& t) {
        if (x.requires_grad()) {
            Tensor gi = linear_grad_input(g, w.value(), x.shape());
            apply_fault("linear", gi);
            t.accumulate(x, std::move(gi));
        }
        if (w.requires_grad()) t.accumulate(w, linear_grad_weight(g, x.value()));
        if (bias && bias->requires_grad()) t.accumulate(*bias, linear_grad_bias(g));
    });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    const Var ins[] = {x};
    return tape_of(x).record(Tensor::scalar(s), ins, [x](const Tensor& g, Tape& t) {
        t.accumulate(x, Tensor(x.shape(), g[0]));
    });
}

Var weighted_sum(Var x, const Tensor& weights) {
    require_same_shape(x.value(), weights, "weighted_sum");
    double s = 0.0;
    for (Index i = 0; i < weights.numel(); ++i) s += x.value()[i] * weights[i];
    const Var ins[] = {x};
    return tape_of(x).record(Tensor::scalar(s), ins, [x, weights](const Tensor& g, Tape& t) {
        Tensor gi(weights.shape());
        for (Index i = 0; i < gi.numel(); ++i) gi[i] = weights[i] * g[0];
        t.accumulate(x, std::move(gi));
    });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
    const double loss = dt::softmax_cross_entropy(logits.value(), labels);
    std::vector<int> lab(labels.begin(), labels.end());
    const Var ins[] = {logits};
    return tape_of(logits).record(Tensor::scalar(loss), ins, [logits, lab = std::move(lab)](const Tensor& g, Tape& t) {
        Tensor gi = softmax_cross_entropy_grad(logits.value(), lab);
        for (Index i = 0; i < gi.numel(); ++i) gi[i] *= g[0];
        apply_fault("softmax_cross_entropy", gi);
        t.accumulate(logits, std::move(gi));
    });
}

}  // namespace ag

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                           const GradCheckOptions& options) {
    GradCheckReport report;
    Gradients analytic;
    {
        Tape tape;
        Var l = loss(tape);
        if (!std::isfinite(l.value().item())) {
            report.failure = "loss is not finite at the base point";
            return report;
        }
        analytic = tape.backward(l);
    }
    auto evaluate = [&loss]() {
        Tape probe(false);
        return loss(probe).value().item();
    };
    Rng rng(options.seed);
    for (Parameter* p : params) {
        GradCheckEntry entry;
        entry.name = p->name;
        const Index n = p->value.numel();
        const auto it = analytic.find(p);
        const Tensor zero(p->value.shape());
        const Tensor& a = it == analytic.end() ? zero : it->second;

        std::vector<Index> coords(static_cast<std::size_t>(n));
        std::iota(coords.begin(), coords.end(), Index{0});
        const Index take = std::min(n, options.coords_per_tensor);
        for (Index i = 0; i < take; ++i) {
            const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
            std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
        }
        coords.resize(static_cast<std::size_t>(take));
        std::sort(coords.begin(), coords.end());

        for (Index idx : coords) {
            const double orig = p->value[idx];
            p->value[idx] = orig + options.step;
            const double fp = evaluate();
            p->value[idx] = orig - options.step;
            const double fm = evaluate();
            p->value[idx] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                report.failure = "non-finite loss when perturbing " + p->name + "[" + std::to_string(idx) + "]";
                report.entries.push_back(entry);
                return report;
            }
            const double num = (fp - fm) / (2.0 * options.step);
            const double an = a[idx];
            const double denom = std::max({std::abs(an), std::abs(num), 1e-8});
            const double rel = std::abs(an - num) / denom;
            ++entry.checked;
            if (entry.worst_index < 0 || rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = idx;
                entry.analytic = an;
                entry.numeric = num;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace dt
