#pragma once

// The three architectural units of the backbone:
//
//   exploration block   F0 = extract(x); F_i = F_{i-1} + recursive(F_{i-1}),
//                       i = 1..R, with ONE recursive parameter set reused by
//                       every iteration;
//   backtrack block     z = avgpool(F); s = sigmoid(W2 relu(W1 z + b1) + b2);
//                       F' = F * s (per channel);
//   DFS block           relu(backtrack(explore(x)) + shortcut(x)).
//
// extract   = bn2(pointwise(dropout(relu(bn1(depthwise_k(x))))))  (carries the stride)
// recursive = bn2(pointwise(relu(bn1(depthwise_k(f)))))           (stride 1, no dropout)

#include <optional>
#include <string>
#include <vector>

#include "deeptraverse/autograd.hpp"
#include "deeptraverse/layers.hpp"
#include "deeptraverse/rng.hpp"

namespace dt {

struct ExtractParams {
    ConvParams depthwise;
    BatchNormParams bn1;
    double dropout_rate = 0.0;
    ConvParams pointwise;
    BatchNormParams bn2;
};

struct RecursiveParams {
    ConvParams depthwise;
    BatchNormParams bn1;
    ConvParams pointwise;
    BatchNormParams bn2;
};

struct BacktrackParams {
    ConvParams reduce;  // W1, b1: C -> hidden
    ConvParams expand;  // W2, b2: hidden -> C
    int reduction = 1;

    Index channels() const { return expand.out_channels(); }
    Index hidden() const { return reduce.out_channels(); }
};

struct ShortcutParams {
    bool identity = true;
    std::optional<ConvParams> projection;
    std::optional<BatchNormParams> bn;
};

struct BlockParams {
    Index in_channels = 0;
    Index out_channels = 0;
    int stride = 1;
    int recursion = 0;
    ExtractParams extract;
    RecursiveParams recursive;
    BacktrackParams backtrack;
    ShortcutParams shortcut;
};

// Hidden width of the excitation path: max(channels / reduction, floor).
Index excitation_width(Index channels, int reduction, Index floor);

struct BlockOptions {
    Index in_channels = 0;
    Index out_channels = 0;
    int stride = 1;
    int recursion = 1;
    int kernel = 3;
    int reduction = 8;
    Index excitation_floor = 4;
    double dropout_rate = 0.0;
};

ExtractParams make_extract(const std::string& name, Index in_channels, Index out_channels, int kernel, int stride,
                           double dropout_rate, Rng& rng);
// The last batchnorm's gamma starts at 0, so every increment starts as 0.
RecursiveParams make_recursive(const std::string& name, Index channels, int kernel, Rng& rng);
BacktrackParams make_backtrack(const std::string& name, Index channels, int reduction, Index excitation_floor,
                               Rng& rng);
// Identity when in == out and stride == 1, otherwise strided 1x1 conv + bn.
ShortcutParams make_shortcut(const std::string& name, Index in_channels, Index out_channels, int stride, Rng& rng);
// Validates the configuration (odd kernel, positive channels, shortcut and main
// branch agree on shape) before creating any tensor.
BlockParams make_block(const std::string& name, const BlockOptions& options, Rng& rng);

// Forward state shared by every op of one pass.
struct Context {
    Tape& tape;
    Mode mode = Mode::Infer;
    Rng* rng = nullptr;  // required when mode == Train and dropout is active
};

Var extract_forward(Context& ctx, Var x, ExtractParams& p);
Var recursive_branch(Context& ctx, Var f, RecursiveParams& p);
Var dfs_eb_forward(Context& ctx, Var x, ExtractParams& extract, RecursiveParams& rec, int recursion);
// `attention`, when non-null, receives the excitation vector s (N x C x 1 x 1).
Var dfs_bb_forward(Context& ctx, Var f, BacktrackParams& p, Var* attention = nullptr);
Var projection_shortcut(Context& ctx, Var x, ShortcutParams& p);
Var dfs_block_forward(Context& ctx, Var x, BlockParams& p);

// Every learnable tensor exactly once, in a fixed order.
void append_parameters(ExtractParams& p, std::vector<Parameter*>& out);
void append_parameters(RecursiveParams& p, std::vector<Parameter*>& out);
void append_parameters(BacktrackParams& p, std::vector<Parameter*>& out);
void append_parameters(ShortcutParams& p, std::vector<Parameter*>& out);
void append_parameters(BlockParams& p, std::vector<Parameter*>& out);

// Every batchnorm layer (for running-statistic bookkeeping).
void append_batchnorms(BlockParams& p, std::vector<BatchNormParams*>& out);

}  // namespace dt
