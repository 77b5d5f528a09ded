#pragma once

// The `dtrv` command line: train, eval, count, gradcheck.
//
// Exit codes: 0 success, 1 gradient check failed, 2 usage / configuration /
// input error, 3 numerical abort during training.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "deeptraverse/config.hpp"
#include "deeptraverse/data.hpp"
#include "deeptraverse/network.hpp"
#include "deeptraverse/train.hpp"

namespace dt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Everything a training run needs besides the data itself. Config-file keys
// (see configs/*.cfg) map onto these fields; flags override them.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string dataset = "cifar10";  // cifar10 | cifar100 | mnist | blobs
    std::uint64_t seed = 1;
    Index train_limit = 0;  // 0 keeps every record
    Index test_limit = 0;
    Index blobs_train = 1000;
    Index blobs_test = 400;
};

// Reads a config file's keys on top of the defaults (dt_tiny for the model).
// Unknown keys are a ConfigError.
RunConfig run_config_from(const KeyValues& kv);
KeyValues run_config_to(const RunConfig& rc);

// SHA-1 of "blob <size>\0<text>", the identifier git gives the same content.
std::string git_blob_sha1(const std::string& text);

// Train and test splits for a run, with the normalization statistics of the
// training split attached to both. `data_dir` is unused for blobs.
struct RunData {
    Dataset train;
    Dataset test;
};
RunData load_run_data(const RunConfig& rc, const std::filesystem::path& data_dir);

}  // namespace dt::cli
