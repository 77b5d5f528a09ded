#pragma once

// Analytic parameter and FLOP counts, derived from the model configuration
// alone (never from the built tensors), so that they can be checked against
// the parameter registry and an instrumented forward pass.
//
// FLOP convention, per image, inference mode:
//   convolution / linear   2 per multiply-accumulate (every kernel tap,
//                          padded or not) + 1 per output element for a bias
//   batchnorm              2 per element
//   relu                   1 per element
//   sigmoid                4 per element
//   average pooling        1 per accumulated element
//   residual add, scale    1 per element
//   dropout                0

#include <cstdint>
#include <string>
#include <vector>

#include "deeptraverse/network.hpp"

namespace dt {

struct CostRow {
    std::string path;
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

struct CostReport {
    std::string method;
    Index input_height = 0;
    Index input_width = 0;
    std::int64_t total_params = 0;
    std::int64_t total_flops = 0;
    std::vector<CostRow> rows;
    std::string notes;
};

// Primitive counts.
std::int64_t conv_params(Index in_channels, Index out_channels, Index kernel, Index groups, bool bias);
std::int64_t conv_flops(Index in_channels, Index out_channels, Index kernel, Index groups, bool bias, Index out_h,
                        Index out_w);
std::int64_t batchnorm_params(Index channels);
std::int64_t linear_flops(Index in_features, Index out_features, bool bias);

// Learnable scalars of the backtrack block: 2 C h + h + C with h the
// excitation width.
std::int64_t backtrack_params(Index channels, int reduction, Index excitation_floor);

std::int64_t count_params(const ModelConfig& cfg);
std::int64_t count_params(const Model& m);
// Sum of element counts over the model's parameter registry.
std::int64_t registry_params(const Model& m);

std::int64_t count_flops(const ModelConfig& cfg, Index input_h, Index input_w);
std::int64_t count_flops(const Model& m, Index input_h, Index input_w);

// Per-module breakdown (stem, each block's extract / recursive / backtrack /
// shortcut / merge, head). Totals are the row sums.
CostReport cost_report(const ModelConfig& cfg, Index input_h, Index input_w, std::string method,
                       std::string notes = "");

struct CostTable {
    std::string text;
    std::string csv;
};

// Fixed-width table (method, input, params in millions, FLOPs in billions,
// top-1/top-5 placeholders) and its CSV twin
// `method,input_h,input_w,params,flops,notes`. Rows keep input order.
CostTable emit_cost_table(const std::vector<CostReport>& reports);

// Per-module rows of one report as text.
std::string format_breakdown(const CostReport& report);

}  // namespace dt
