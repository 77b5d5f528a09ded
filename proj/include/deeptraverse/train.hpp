#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "deeptraverse/autograd.hpp"
#include "deeptraverse/data.hpp"
#include "deeptraverse/network.hpp"
#include "deeptraverse/rng.hpp"

namespace dt {

enum class Schedule { Cosine, Constant };
Schedule parse_schedule(const std::string& s);
std::string to_string(Schedule s);

struct TrainConfig {
    int epochs = 100;
    Index batch_size = 128;
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    // Also decay batchnorm scales/shifts and biases (excluded by default).
    bool decay_norm_and_bias = false;
    Schedule schedule = Schedule::Cosine;
    AugmentPolicy augment = AugmentPolicy::FlipCrop;
};

struct OptimState {
    double base_lr = 0.1;
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool decay_norm_and_bias = false;
    Schedule schedule = Schedule::Cosine;
    int total_epochs = 1;
    int epoch = 0;  // completed epochs
    std::int64_t step = 0;
    // Keyed by parameter name; created on first update.
    std::map<std::string, Tensor> velocity;
};

OptimState make_optim_state(const TrainConfig& cfg);

// Cosine: base * (1 + cos(pi * epoch / total)) / 2, reaching 0 at `total`.
double scheduled_lr(const OptimState& st, int epoch);

// v <- momentum * v + g + wd * theta (wd only where Parameter::decay, unless
// decay_norm_and_bias);
// theta <- theta - lr * v. A parameter without an entry in `grads` has g = 0.
// Every gradient is checked before any parameter moves; a non-finite one
// throws NumericError naming the parameter.
void sgd_step(const std::vector<Parameter*>& params, const Gradients& grads, OptimState& st);

struct EpochMetrics {
    double loss = 0.0;
    double accuracy = 0.0;  // fraction, training-mode predictions
    Index samples = 0;
};

// One pass over a deterministic shuffle of `data`: augment, normalize with
// data.stats, forward in training mode, cross-entropy, backward, sgd_step.
// Uses the scheduled rate for st.epoch, then advances st.epoch. A trailing
// batch of a single sample is skipped (batch statistics need two values).
EpochMetrics train_epoch(Model& model, const Dataset& data, OptimState& st, Rng& rng, Index batch_size,
                         AugmentPolicy augment);

struct EvalMetrics {
    double top1 = 0.0;  // fractions
    double top5 = 0.0;
    double loss = 0.0;
    Index samples = 0;
};

// A label counts as a top-k hit when fewer than k logits rank above it, where
// j ranks above the label if its logit is larger, or equal with j < label.
bool in_top_k(std::span<const double> row, int label, int k);

// Sums over a logit matrix (not averaged).
struct ScoreSums {
    Index top1 = 0;
    Index top5 = 0;
    double loss = 0.0;
};
ScoreSums score_logits(const Tensor& logits, std::span<const int> labels);

// Inference mode; normalizes batches with data.stats unless the dataset is
// already normalized.
EvalMetrics evaluate(Model& model, const Dataset& data, Index batch_size = 256);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_loss = 0.0;
    double test_top1 = 0.0;
    double test_top5 = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRecord& r);
EpochRecord parse_metrics_row(const std::string& line);

// Keeps freed activation memory inside the process between steps instead of
// returning it to the kernel (no-op outside glibc).
void retain_freed_memory();

}  // namespace dt
