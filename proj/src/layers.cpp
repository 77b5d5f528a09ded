#include "deeptraverse/layers.hpp"

#include <cmath>

#include "deeptraverse/errors.hpp"

namespace dt {

ConvParams make_conv(const std::string& name, Index in_channels, Index out_channels, Index kernel, ConvSpec spec,
                     bool with_bias, Rng& rng) {
    if (in_channels % spec.groups != 0 || out_channels % spec.groups != 0) {
        throw ConfigError(name + ": groups " + std::to_string(spec.groups) + " must divide channel counts");
    }
    const Index fan_in = in_channels / spec.groups * kernel * kernel;
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    ConvParams p;
    p.spec = spec;
    p.weight.name = name + ".weight";
    p.weight.value = Tensor(Shape{out_channels, in_channels / spec.groups, kernel, kernel});
    for (Index i = 0; i < p.weight.value.numel(); ++i) p.weight.value[i] = std_dev * rng.normal();
    if (with_bias) p.bias = Parameter{name + ".bias", Tensor(Shape{out_channels}), false};
    return p;
}

BatchNormParams make_batchnorm(const std::string& name, Index channels, double gamma_init) {
    BatchNormParams p;
    p.gamma = Parameter{name + ".gamma", Tensor(Shape{channels}, gamma_init), false};
    p.beta = Parameter{name + ".beta", Tensor(Shape{channels}, 0.0), false};
    p.running_mean = Tensor(Shape{channels}, 0.0);
    p.running_var = Tensor(Shape{channels}, 1.0);
    return p;
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
    return conv2d(x, p.weight.value, p.bias ? &p.bias->value : nullptr, p.spec);
}

Tensor batchnorm2d(const Tensor& x, BatchNormParams& p, Mode mode) {
    require_nchw(x, "batchnorm2d");
    if (x.dim(1) != p.channels()) {
        throw ConfigError("batchnorm2d: input has " + std::to_string(x.dim(1)) + " channels, parameters have " +
                          std::to_string(p.channels()));
    }
    if (mode == Mode::Infer) {
        return batchnorm2d_infer(x, p.gamma.value, p.beta.value, p.running_mean, p.running_var, p.eps);
    }
    BatchStats stats;
    Tensor out = batchnorm2d_train(x, p.gamma.value, p.beta.value, p.eps, stats);
    for (Index c = 0; c < p.channels(); ++c) {
        p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * stats.mean[c];
        p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * stats.var[c];
    }
    return out;
}

}  // namespace dt
