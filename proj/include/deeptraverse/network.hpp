#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deeptraverse/autograd.hpp"
#include "deeptraverse/blocks.hpp"
#include "deeptraverse/config.hpp"
#include "deeptraverse/layers.hpp"

namespace dt {

struct StageConfig {
    Index out_channels = 16;
    int num_blocks = 1;
    int stride = 1;
    std::optional<int> recursion;  // overrides ModelConfig::recursion

    bool operator==(const StageConfig&) const = default;
};

struct ModelConfig {
    Index input_channels = 3;
    Index input_height = 32;
    Index input_width = 32;
    Index stem_channels = 16;
    std::vector<StageConfig> stages;
    int reduction = 8;
    int recursion = 2;
    double dropout_rate = 0.1;
    Index num_classes = 10;
    int depthwise_kernel = 3;
    Index excitation_floor = 4;

    int stage_recursion(std::size_t stage) const { return stages[stage].recursion.value_or(recursion); }

    bool operator==(const ModelConfig&) const = default;
};

inline constexpr int kConfigVersion = 1;

// Stem 3x3 -> 16, stages (16 x 3, stride 1), (32 x 3, stride 2),
// (64 x 3, stride 2), R = 2, r = 8, dropout 0.1, GAP + linear head.
ModelConfig dt_tiny(Index input_channels = 3, Index num_classes = 10, Index input_size = 32);

// Throws ConfigError naming the first invalid field.
void validate(const ModelConfig& cfg);

// Stage syntax: `<channels>x<blocks>s<stride>[r<recursion>]`, e.g. `32x3s2`.
std::string format_stage(const StageConfig& s);
StageConfig parse_stage(const std::string& text);

// Reads/writes the model fields of a key/value config. `config_version`
// must equal kConfigVersion.
ModelConfig model_config_from(const KeyValues& kv);
void model_config_to(const ModelConfig& cfg, KeyValues& kv);

struct Model {
    ModelConfig config;
    ConvParams stem;
    BatchNormParams stem_bn;
    std::vector<BlockParams> blocks;
    Parameter head_weight;
    Parameter head_bias;

    // Registry of learnable tensors: each exactly once (the shared recursive
    // branch of a block appears once regardless of R).
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<BatchNormParams*> batchnorms();
    std::vector<const BatchNormParams*> batchnorms() const;

    // Product of stage strides.
    Index downsample_factor() const;
};

// Deterministic for a fixed seed. Fails fast (ConfigError) on any invalid
// field or shape inconsistency.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

// stem -> blocks -> global average pool -> linear. Returns N x num_classes.
Var forward(Context& ctx, Model& model, Var batch);
// Inference-mode convenience without gradient recording.
Tensor infer(Model& model, const Tensor& batch);

// Row-wise argmax; ties go to the lowest index.
std::vector<int> predict(const Tensor& logits);

}  // namespace dt
