#pragma once

#include <optional>
#include <string>

#include "deeptraverse/kernels.hpp"
#include "deeptraverse/tensor.hpp"

namespace dt {

// A learnable tensor. `decay` marks whether weight decay applies to it.
struct Parameter {
    std::string name;
    Tensor value;
    bool decay = true;
};

struct ConvParams {
    Parameter weight;
    std::optional<Parameter> bias;
    ConvSpec spec;

    Index out_channels() const { return weight.value.dim(0); }
    Index kernel() const { return weight.value.dim(2); }
};

struct BatchNormParams {
    Parameter gamma;
    Parameter beta;
    Tensor running_mean;
    Tensor running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    Index channels() const { return gamma.value.numel(); }
};

// Fan-in scaled Gaussian (std = sqrt(2 / fan_in)).
ConvParams make_conv(const std::string& name, Index in_channels, Index out_channels, Index kernel, ConvSpec spec,
                     bool with_bias, Rng& rng);
BatchNormParams make_batchnorm(const std::string& name, Index channels, double gamma_init = 1.0);

Tensor conv2d(const Tensor& x, const ConvParams& p);
// Training mode normalizes with batch statistics and updates the running
// statistics (biased variance for both); inference mode uses running stats.
Tensor batchnorm2d(const Tensor& x, BatchNormParams& p, Mode mode);

}  // namespace dt
