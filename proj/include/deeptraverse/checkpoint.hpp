#pragma once

// Single-file checkpoint container, all integers little-endian:
//
//   8 bytes   magic "DTRVCKPT"
//   u32       format version (kCheckpointVersion)
//   u64       metadata length L, then L bytes of `key = value` lines (sorted)
//   u32       tensor count
//   per tensor:
//     u32 name length, name bytes, u8 dtype tag (1 = f64), u32 rank,
//     rank x u64 extents, numel x f64 payload
//
// Tensors: every registry parameter under its own name, each batchnorm's
// `<bn>.running_mean` / `<bn>.running_var`, then optimizer velocities as
// `velocity/<parameter name>`.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deeptraverse/config.hpp"
#include "deeptraverse/data.hpp"
#include "deeptraverse/network.hpp"
#include "deeptraverse/train.hpp"

namespace dt {

inline constexpr char kCheckpointMagic[8] = {'D', 'T', 'R', 'V', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct TrainState {
    OptimState optim;
    std::string rng_state;
    std::vector<EpochRecord> history;
    ChannelStats stats;
    // Free-form run fields (dataset kind, augment policy, batch size, ...).
    KeyValues extra;
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct Checkpoint {
    ModelConfig config;
    Model model;
    TrainState state;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const TrainState& state);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames, so a crash never leaves a
// half-written file under `path`.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameters and running statistics from `ckpt` into `target`, whose
// configuration may differ in recursion depth only in ways that leave the
// tensor set unchanged. FormatError names a missing or mis-shaped tensor.
void load_parameters(const Checkpoint& ckpt, Model& target);

// Low-level container access (used by tests to build and inspect files).
struct RawCheckpoint {
    std::uint32_t version = 0;
    std::string metadata;
    std::vector<NamedTensor> tensors;
};
std::vector<std::uint8_t> encode_raw(const RawCheckpoint& raw);
RawCheckpoint decode_raw(std::span<const std::uint8_t> bytes);

}  // namespace dt
