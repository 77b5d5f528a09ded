#include "deeptraverse/train.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "deeptraverse/errors.hpp"

namespace dt {

Schedule parse_schedule(const std::string& s) {
    if (s == "cosine") return Schedule::Cosine;
    if (s == "constant") return Schedule::Constant;
    throw ConfigError("unknown schedule `" + s + "` (expected cosine or constant)");
}

std::string to_string(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

OptimState make_optim_state(const TrainConfig& cfg) {
    if (!(cfg.learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    OptimState st;
    st.base_lr = cfg.learning_rate;
    st.learning_rate = cfg.learning_rate;
    st.momentum = cfg.momentum;
    st.weight_decay = cfg.weight_decay;
    st.decay_norm_and_bias = cfg.decay_norm_and_bias;
    st.schedule = cfg.schedule;
    st.total_epochs = cfg.epochs;
    return st;
}

double scheduled_lr(const OptimState& st, int epoch) {
    if (st.schedule == Schedule::Constant) return st.base_lr;
    const double t = static_cast<double>(epoch) / static_cast<double>(st.total_epochs);
    return st.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void sgd_step(const std::vector<Parameter*>& params, const Gradients& grads, OptimState& st) {
    for (const Parameter* p : params) {
        const auto it = grads.find(p);
        if (it == grads.end()) continue;
        if (it->second.shape() != p->value.shape()) {
            throw InternalError("gradient for " + p->name + " has shape " + it->second.shape().str() +
                                ", parameter has " + p->value.shape().str());
        }
        if (!it->second.all_finite()) {
            throw NumericError("non-finite gradient for parameter " + p->name + " at step " +
                               std::to_string(st.step));
        }
    }
    for (Parameter* p : params) {
        auto [vit, fresh] = st.velocity.try_emplace(p->name, p->value.shape());
        Tensor& v = vit->second;
        if (!fresh && v.shape() != p->value.shape()) {
            throw InternalError("velocity for " + p->name + " has shape " + v.shape().str());
        }
        const auto git = grads.find(p);
        const double* g = git == grads.end() ? nullptr : git->second.data();
        const double wd = p->decay || st.decay_norm_and_bias ? st.weight_decay : 0.0;
        double* theta = p->value.data();
        double* vel = v.data();
        for (Index i = 0; i < v.numel(); ++i) {
            const double gi = g ? g[i] : 0.0;
            vel[i] = st.momentum * vel[i] + gi + wd * theta[i];
            theta[i] -= st.learning_rate * vel[i];
        }
    }
    ++st.step;
}

EpochMetrics train_epoch(Model& model, const Dataset& data, OptimState& st, Rng& rng, Index batch_size,
                         AugmentPolicy augment_policy) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (data.size() < 2) throw InputError("train_epoch: need at least 2 samples");
    if (!data.normalized && data.stats.mean.empty()) {
        throw InputError("train_epoch: dataset has no normalization statistics");
    }
    st.learning_rate = scheduled_lr(st, st.epoch);

    const Index n = data.size();
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    const std::vector<Parameter*> params = model.parameters();
    EpochMetrics m;
    double loss_sum = 0.0;
    Index correct = 0;
    for (Index start = 0; start < n; start += batch_size) {
        const Index count = std::min(batch_size, n - start);
        if (count < 2) break;
        Batch batch = make_batch(data, std::span<const Index>(order.data() + start, static_cast<std::size_t>(count)));
        augment(batch, rng, augment_policy);
        if (!batch.normalized) normalize(batch, data.stats);

        Tape tape;
        Context ctx{tape, Mode::Train, &rng};
        Var logits = forward(ctx, model, tape.input(std::move(batch.images)));
        Var loss = ag::softmax_cross_entropy(logits, batch.labels);
        const double value = loss.value().item();
        if (!std::isfinite(value)) {
            throw NumericError("non-finite loss at epoch " + std::to_string(st.epoch + 1) + ", step " +
                               std::to_string(st.step));
        }
        const std::vector<int> pred = predict(logits.value());
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
        loss_sum += value * static_cast<double>(count);
        m.samples += count;

        const Gradients grads = tape.backward(loss);
        sgd_step(params, grads, st);
    }
    ++st.epoch;
    if (m.samples > 0) {
        m.loss = loss_sum / static_cast<double>(m.samples);
        m.accuracy = static_cast<double>(correct) / static_cast<double>(m.samples);
    }
    return m;
}

bool in_top_k(std::span<const double> row, int label, int k) {
    const double v = row[static_cast<std::size_t>(label)];
    int above = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (row[j] > v || (row[j] == v && static_cast<int>(j) < label)) ++above;
    }
    return above < k;
}

ScoreSums score_logits(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
        throw InputError("score_logits: logits " + logits.shape().str() + " do not match " +
                         std::to_string(labels.size()) + " labels");
    }
    const Index n = logits.dim(0), c = logits.dim(1);
    ScoreSums s;
    for (Index i = 0; i < n; ++i) {
        const std::span<const double> row(logits.data() + i * c, static_cast<std::size_t>(c));
        const int label = labels[static_cast<std::size_t>(i)];
        s.top1 += in_top_k(row, label, 1) ? 1 : 0;
        s.top5 += in_top_k(row, label, 5) ? 1 : 0;
    }
    s.loss = softmax_cross_entropy(logits, labels) * static_cast<double>(n);
    return s;
}

EvalMetrics evaluate(Model& model, const Dataset& data, Index batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    EvalMetrics m;
    ScoreSums total;
    std::vector<Index> idx;
    for (Index start = 0; start < data.size(); start += batch_size) {
        const Index count = std::min(batch_size, data.size() - start);
        idx.resize(static_cast<std::size_t>(count));
        for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
        Batch batch = make_batch(data, idx);
        if (!batch.normalized && !data.stats.mean.empty()) normalize(batch, data.stats);
        const Tensor logits = infer(model, batch.images);
        const ScoreSums s = score_logits(logits, batch.labels);
        total.top1 += s.top1;
        total.top5 += s.top5;
        total.loss += s.loss;
        m.samples += count;
    }
    if (m.samples > 0) {
        const auto n = static_cast<double>(m.samples);
        m.top1 = static_cast<double>(total.top1) / n;
        m.top5 = static_cast<double>(total.top5) / n;
        m.loss = total.loss / n;
    }
    return m;
}

std::string metrics_csv_header() { return "epoch,lr,train_loss,train_acc,test_loss,test_top1,test_top5"; }

std::string metrics_csv_row(const EpochRecord& r) {
    return std::to_string(r.epoch) + "," + format_double(r.lr) + "," + format_double(r.train_loss) + "," +
           format_double(r.train_acc) + "," + format_double(r.test_loss) + "," + format_double(r.test_top1) + "," +
           format_double(r.test_top5);
}

EpochRecord parse_metrics_row(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 7) throw FormatError("metrics row needs 7 fields, got " + std::to_string(f.size()));
    KeyValues kv;
    const char* names[] = {"epoch", "lr", "train_loss", "train_acc", "test_loss", "test_top1", "test_top5"};
    for (std::size_t i = 0; i < 7; ++i) kv.set(names[i], f[i]);
    EpochRecord r;
    r.epoch = static_cast<int>(kv.get_int("epoch"));
    r.lr = kv.get_double("lr");
    r.train_loss = kv.get_double("train_loss");
    r.train_acc = kv.get_double("train_acc");
    r.test_loss = kv.get_double("test_loss");
    r.test_top1 = kv.get_double("test_top1");
    r.test_top5 = kv.get_double("test_top5");
    return r;
}

void retain_freed_memory() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, -1);
#endif
}

}  // namespace dt
