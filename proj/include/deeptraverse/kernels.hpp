#pragma once

// Primitive tensor kernels (forward and backward). All functions are pure;
// none of them allocate global state or depend on thread count.

#include <cstdint>
#include <span>
#include <vector>

#include "deeptraverse/rng.hpp"
#include "deeptraverse/tensor.hpp"

namespace dt {

enum class Mode { Train, Infer };

struct ConvSpec {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

// Output extents of a 2-D convolution of x (N x C_in x H x W) with weights
// (C_out x C_in/groups x k x k). Validates every dimension and throws
// ConfigError naming the offending one.
Shape conv2d_output_shape(const Shape& x, const Shape& w, ConvSpec spec);

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvSpec spec);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape, ConvSpec spec);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape, ConvSpec spec);
Tensor conv2d_grad_bias(const Tensor& grad_out);

// Per-channel statistics of a training-mode batchnorm pass.
struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;      // biased, divisor N*H*W
    std::vector<double> inv_std;  // 1 / sqrt(var + eps)
};

// Normalizes with batch statistics; fills `stats`.
Tensor batchnorm2d_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         BatchStats& stats);
Tensor batchnorm2d_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const Tensor& running_mean, const Tensor& running_var, double eps);

struct BatchNormGrads {
    Tensor input;
    Tensor gamma;
    Tensor beta;
};

// Full backward through the batch statistics.
BatchNormGrads batchnorm2d_train_backward(const Tensor& grad_out, const Tensor& x, const Tensor& gamma,
                                          const BatchStats& stats);
BatchNormGrads batchnorm2d_infer_backward(const Tensor& grad_out, const Tensor& x, const Tensor& gamma,
                                          const Tensor& running_mean, const Tensor& running_var,
                                          double eps);

Tensor relu(const Tensor& x);
// Uses the forward output; relu'(0) = 0.
Tensor relu_backward(const Tensor& grad_out, const Tensor& y);
// Zeroes grad where y <= 0.
void relu_backward_inplace(Tensor& grad, const Tensor& y);

Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y);

// Inverted dropout. `mask` receives 1 for survivors, 0 for dropped elements.
// Inference mode or rate 0 returns x unchanged and leaves `mask` empty.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng, std::vector<std::uint8_t>& mask);
Tensor dropout_backward(const Tensor& grad_out, double rate, const std::vector<std::uint8_t>& mask);

// N x C x H x W -> N x C x 1 x 1 spatial mean.
Tensor adaptive_avg_pool_1x1(const Tensor& x);
Tensor adaptive_avg_pool_1x1_backward(const Tensor& grad_out, const Shape& x_shape);

// x: N x C x H x W, s: N x C x 1 x 1.
Tensor channel_scale(const Tensor& x, const Tensor& s);
Tensor channel_scale_grad_x(const Tensor& grad_out, const Tensor& s);
Tensor channel_scale_grad_s(const Tensor& grad_out, const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& acc, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x: N x K (or N x K x 1 x 1), w: M x K, bias: M. Output N x M.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias);
Tensor linear_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape);
Tensor linear_grad_weight(const Tensor& grad_out, const Tensor& x);
Tensor linear_grad_bias(const Tensor& grad_out);

// Mean over the batch of -log softmax(logits)[label]; logits N x c.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
// d loss / d logits.
Tensor softmax_cross_entropy_grad(const Tensor& logits, std::span<const int> labels);

}  // namespace dt
