#include "deeptraverse/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "deeptraverse/errors.hpp"

namespace dt {

namespace fs = std::filesystem;

namespace {

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    void need(std::size_t n, const char* what) const {
        if (b_.size() - pos_ < n) {
            throw FormatError(std::string("truncated checkpoint while reading ") + what + " at byte " +
                              std::to_string(pos_));
        }
    }
    const std::uint8_t* bytes(std::size_t n, const char* what) {
        need(n, what);
        const std::uint8_t* p = b_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint8_t u8(const char* what) { return *bytes(1, what); }
    std::uint32_t u32(const char* what) {
        const std::uint8_t* p = bytes(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        const std::uint8_t* p = bytes(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
        return v;
    }
    bool done() const { return pos_ == b_.size(); }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_double(v[i]);
    }
    return out;
}

std::vector<double> split_doubles(const std::string& s, const std::string& key) {
    std::vector<double> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        KeyValues kv;
        kv.set(key, item);
        out.push_back(kv.get_double(key));
    }
    return out;
}

std::string metrics_key(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "metrics.%04zu", i);
    return buf;
}

std::string bn_name(const BatchNormParams& bn) {
    const std::string& g = bn.gamma.name;
    const std::string suffix = ".gamma";
    return g.size() > suffix.size() ? g.substr(0, g.size() - suffix.size()) : g;
}

std::string build_metadata(const Model& model, const TrainState& st) {
    KeyValues kv;
    model_config_to(model.config, kv);
    const OptimState& o = st.optim;
    kv.set("optim.base_lr", format_double(o.base_lr));
    kv.set("optim.learning_rate", format_double(o.learning_rate));
    kv.set("optim.momentum", format_double(o.momentum));
    kv.set("optim.weight_decay", format_double(o.weight_decay));
    kv.set("optim.decay_norm_and_bias", o.decay_norm_and_bias ? "true" : "false");
    kv.set("optim.schedule", to_string(o.schedule));
    kv.set("optim.total_epochs", std::to_string(o.total_epochs));
    kv.set("optim.step", std::to_string(o.step));
    kv.set("train.epoch", std::to_string(o.epoch));
    kv.set("rng.state", st.rng_state);
    kv.set("data.mean", join_doubles(st.stats.mean));
    kv.set("data.std", join_doubles(st.stats.std));
    for (std::size_t i = 0; i < st.history.size(); ++i) kv.set(metrics_key(i), metrics_csv_row(st.history[i]));
    for (const auto& [k, v] : st.extra.entries()) kv.set("run." + k, v);
    for (const auto& [k, v] : kv.entries()) {
        if (v.find_first_of("#\n") != std::string::npos) {
            throw InputError("checkpoint metadata value for `" + k + "` contains '#' or a newline");
        }
    }
    return kv.serialize();
}

}  // namespace

std::vector<std::uint8_t> encode_raw(const RawCheckpoint& raw) {
    Writer w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(raw.version);
    w.u64(raw.metadata.size());
    w.bytes(raw.metadata.data(), raw.metadata.size());
    w.u32(static_cast<std::uint32_t>(raw.tensors.size()));
    for (const NamedTensor& t : raw.tensors) {
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.u8(kDtypeF64);
        w.u32(static_cast<std::uint32_t>(t.value.rank()));
        for (Index d : t.value.shape().dims()) w.u64(static_cast<std::uint64_t>(d));
        for (double v : t.value.values()) w.f64(v);
    }
    return w.take();
}

RawCheckpoint decode_raw(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const std::uint8_t* magic = r.bytes(sizeof kCheckpointMagic, "magic");
    if (std::memcmp(magic, kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
        throw FormatError("not a checkpoint: bad magic (expected DTRVCKPT)");
    }
    RawCheckpoint raw;
    raw.version = r.u32("version");
    if (raw.version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(raw.version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint64_t meta_len = r.u64("metadata length");
    r.need(meta_len, "metadata");
    const std::uint8_t* meta = r.bytes(meta_len, "metadata");
    raw.metadata.assign(reinterpret_cast<const char*>(meta), meta_len);
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const std::uint32_t name_len = r.u32("tensor name length");
        const std::uint8_t* name = r.bytes(name_len, "tensor name");
        t.name.assign(reinterpret_cast<const char*>(name), name_len);
        const std::uint8_t dtype = r.u8("dtype tag");
        if (dtype != kDtypeF64) {
            throw FormatError("tensor " + t.name + ": unsupported dtype tag " + std::to_string(dtype));
        }
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank == 0 || rank > 8) throw FormatError("tensor " + t.name + ": invalid rank " + std::to_string(rank));
        std::vector<Index> dims;
        std::uint64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint64_t e = r.u64("tensor extent");
            if (e == 0 || e > (std::uint64_t{1} << 40)) {
                throw FormatError("tensor " + t.name + ": invalid extent " + std::to_string(e));
            }
            numel *= e;
            if (numel > r.remaining() / 8 + 1) throw FormatError("truncated checkpoint in tensor " + t.name);
            dims.push_back(static_cast<Index>(e));
        }
        const std::uint8_t* payload = r.bytes(numel * 8, "tensor payload");
        t.value = Tensor::uninitialized(Shape(std::move(dims)));
        for (std::uint64_t k = 0; k < numel; ++k) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= std::uint64_t{payload[k * 8 + b]} << (8 * b);
            t.value[static_cast<Index>(k)] = std::bit_cast<double>(bits);
        }
        raw.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("trailing bytes after the last tensor record");
    return raw;
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const TrainState& state) {
    RawCheckpoint raw;
    raw.version = kCheckpointVersion;
    raw.metadata = build_metadata(model, state);
    for (const Parameter* p : model.parameters()) raw.tensors.push_back({p->name, p->value});
    for (const BatchNormParams* bn : model.batchnorms()) {
        raw.tensors.push_back({bn_name(*bn) + ".running_mean", bn->running_mean});
        raw.tensors.push_back({bn_name(*bn) + ".running_var", bn->running_var});
    }
    for (const Parameter* p : model.parameters()) {
        const auto it = state.optim.velocity.find(p->name);
        if (it != state.optim.velocity.end()) raw.tensors.push_back({"velocity/" + p->name, it->second});
    }
    return encode_raw(raw);
}

namespace {

void assign(const std::map<std::string, const Tensor*>& tensors, const std::string& name, Tensor& dst) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second->shape() != dst.shape()) {
        throw FormatError("tensor " + name + " has shape " + it->second->shape().str() + ", model expects " +
                          dst.shape().str());
    }
    dst = *it->second;
}

void fill_model(const std::vector<NamedTensor>& list, Model& model, bool allow_velocity) {
    std::map<std::string, const Tensor*> tensors;
    for (const NamedTensor& t : list) {
        if (!tensors.emplace(t.name, &t.value).second) throw FormatError("duplicate tensor " + t.name);
    }
    std::size_t used = 0;
    for (Parameter* p : model.parameters()) {
        assign(tensors, p->name, p->value);
        ++used;
    }
    for (BatchNormParams* bn : model.batchnorms()) {
        assign(tensors, bn_name(*bn) + ".running_mean", bn->running_mean);
        assign(tensors, bn_name(*bn) + ".running_var", bn->running_var);
        used += 2;
    }
    for (const NamedTensor& t : list) {
        if (t.name.rfind("velocity/", 0) == 0) {
            if (!allow_velocity) continue;
            ++used;
            continue;
        }
    }
    if (used != tensors.size()) {
        for (const NamedTensor& t : list) {
            bool known = t.name.rfind("velocity/", 0) == 0;
            for (const Parameter* p : model.parameters()) known = known || p->name == t.name;
            for (const BatchNormParams* bn : model.batchnorms()) {
                known = known || t.name == bn_name(*bn) + ".running_mean" || t.name == bn_name(*bn) + ".running_var";
            }
            if (!known) throw FormatError("checkpoint has unexpected tensor " + t.name);
        }
    }
}

}  // namespace

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    const RawCheckpoint raw = decode_raw(bytes);
    const KeyValues kv = KeyValues::parse(raw.metadata, "checkpoint metadata");
    Checkpoint ck;
    try {
        ck.config = model_config_from(kv);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    ck.model = build_model(ck.config, 0);
    fill_model(raw.tensors, ck.model, true);

    TrainState& st = ck.state;
    OptimState& o = st.optim;
    try {
        o.base_lr = kv.get_double("optim.base_lr");
        o.learning_rate = kv.get_double("optim.learning_rate");
        o.momentum = kv.get_double("optim.momentum");
        o.weight_decay = kv.get_double("optim.weight_decay");
        o.decay_norm_and_bias = kv.get_bool("optim.decay_norm_and_bias");
        o.schedule = parse_schedule(kv.get_string("optim.schedule"));
        o.total_epochs = static_cast<int>(kv.get_int("optim.total_epochs"));
        o.step = kv.get_int("optim.step");
        o.epoch = static_cast<int>(kv.get_int("train.epoch"));
        st.rng_state = kv.get_string("rng.state");
        st.stats.mean = split_doubles(kv.get_string("data.mean"), "data.mean");
        st.stats.std = split_doubles(kv.get_string("data.std"), "data.std");
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    for (std::size_t i = 0; kv.has(metrics_key(i)); ++i) {
        st.history.push_back(parse_metrics_row(kv.get_string(metrics_key(i))));
    }
    for (const auto& [k, v] : kv.entries()) {
        if (k.rfind("run.", 0) == 0) st.extra.set(k.substr(4), v);
    }
    std::map<std::string, const Parameter*> params;
    for (const Parameter* p : ck.model.parameters()) params.emplace(p->name, p);
    for (const NamedTensor& t : raw.tensors) {
        if (t.name.rfind("velocity/", 0) != 0) continue;
        const std::string name = t.name.substr(9);
        const auto it = params.find(name);
        if (it == params.end()) throw FormatError("velocity for unknown parameter " + name);
        if (it->second->value.shape() != t.value.shape()) {
            throw FormatError("tensor " + t.name + " has shape " + t.value.shape().str() + ", parameter has " +
                              it->second->value.shape().str());
        }
        o.velocity[name] = t.value;
    }
    return ck;
}

void save_checkpoint(const fs::path& path, const Model& model, const TrainState& state) {
    const std::vector<std::uint8_t> bytes = encode_checkpoint(model, state);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("cannot write " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void load_parameters(const Checkpoint& ckpt, Model& target) {
    std::vector<NamedTensor> list;
    for (const Parameter* p : ckpt.model.parameters()) list.push_back({p->name, p->value});
    for (const BatchNormParams* bn : ckpt.model.batchnorms()) {
        list.push_back({bn_name(*bn) + ".running_mean", bn->running_mean});
        list.push_back({bn_name(*bn) + ".running_var", bn->running_var});
    }
    fill_model(list, target, false);
}

}  // namespace dt
