#pragma once

// Finite-difference verification suite shared by the `gradcheck` command and
// the acceptance run.

#include <cstdint>
#include <string>
#include <vector>

#include "deeptraverse/autograd.hpp"
#include "deeptraverse/network.hpp"

namespace dt {

struct GradCheckCase {
    std::string component;
    GradCheckReport report;
};

// Moves every batchnorm scale, shift and running statistic and every bias
// away from its initial value, so that no path through the block is
// identically zero while being checked. Scales are drawn from
// [gamma_low, gamma_high).
void scramble_for_check(std::vector<Parameter*> params, std::vector<BatchNormParams*> bns, Rng& rng,
                        double gamma_low = 0.5, double gamma_high = 1.5);

// Components, in order:
//   dfs_eb R=0, R=1, R=3   extract 4 -> 8 (stride 2) plus recursion, training-mode batchnorm
//   dfs_bb                 8 channels, r = 4
//   dfs_block identity     8 -> 8, stride 1, R = 2
//   dfs_block projection   4 -> 8, stride 2, R = 2
//   model                  `model_config`, inference mode, cross-entropy over a batch of 2
// The backtrack check also covers its input. Every probe input is chosen so
// that no relu input lies near the kink.
std::vector<GradCheckCase> run_gradcheck_suite(const ModelConfig& model_config, std::uint64_t seed,
                                               const GradCheckOptions& options = {});

}  // namespace dt
