#include "deeptraverse/network.hpp"

#include <cmath>
#include <regex>
#include <sstream>

#include "deeptraverse/errors.hpp"

namespace dt {

ModelConfig dt_tiny(Index input_channels, Index num_classes, Index input_size) {
    ModelConfig cfg;
    cfg.input_channels = input_channels;
    cfg.input_height = input_size;
    cfg.input_width = input_size;
    cfg.stem_channels = 16;
    cfg.stages = {{16, 3, 1, std::nullopt}, {32, 3, 2, std::nullopt}, {64, 3, 2, std::nullopt}};
    cfg.reduction = 8;
    cfg.recursion = 2;
    cfg.dropout_rate = 0.1;
    cfg.num_classes = num_classes;
    cfg.depthwise_kernel = 3;
    cfg.excitation_floor = 4;
    return cfg;
}

void validate(const ModelConfig& cfg) {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("invalid model config: `" + field + "` " + why);
    };
    if (cfg.input_channels < 1) fail("input_channels", "must be >= 1");
    if (cfg.input_height < 1) fail("input_height", "must be >= 1");
    if (cfg.input_width < 1) fail("input_width", "must be >= 1");
    if (cfg.stem_channels < 1) fail("stem_channels", "must be >= 1");
    if (cfg.stages.empty()) fail("stages", "must list at least one stage");
    if (cfg.reduction < 1) fail("reduction", "must be >= 1");
    if (cfg.recursion < 0) fail("recursion", "must be >= 0");
    if (!(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0)) fail("dropout_rate", "must be in [0, 1)");
    if (cfg.num_classes < 2) fail("num_classes", "must be >= 2");
    if (cfg.depthwise_kernel < 1 || cfg.depthwise_kernel % 2 == 0) fail("depthwise_kernel", "must be a positive odd integer");
    if (cfg.excitation_floor < 1) fail("excitation_floor", "must be >= 1");
    Index h = cfg.input_height, w = cfg.input_width;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
        const StageConfig& s = cfg.stages[i];
        const std::string field = "stages[" + std::to_string(i) + "]";
        if (s.out_channels < 1) fail(field, "out_channels must be >= 1");
        if (s.num_blocks < 1) fail(field, "num_blocks must be >= 1");
        if (s.stride != 1 && s.stride != 2) fail(field, "stride must be 1 or 2");
        if (s.recursion && *s.recursion < 0) fail(field, "recursion must be >= 0");
        // Main branch: pad (k-1)/2 with odd k keeps floor((H-1)/s) + 1.
        h = (h - 1) / s.stride + 1;
        w = (w - 1) / s.stride + 1;
        if (h < 1 || w < 1) fail(field, "collapses the spatial size to zero");
    }
}

std::string format_stage(const StageConfig& s) {
    std::string out = std::to_string(s.out_channels) + "x" + std::to_string(s.num_blocks) + "s" + std::to_string(s.stride);
    if (s.recursion) out += "r" + std::to_string(*s.recursion);
    return out;
}

StageConfig parse_stage(const std::string& text) {
    static const std::regex re(R"(\s*(\d+)x(\d+)s(\d+)(?:r(\d+))?\s*)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) {
        throw ConfigError("invalid stage `" + text + "`: expected <channels>x<blocks>s<stride>[r<recursion>]");
    }
    StageConfig s;
    s.out_channels = std::stoll(m[1]);
    s.num_blocks = std::stoi(m[2]);
    s.stride = std::stoi(m[3]);
    if (m[4].matched) s.recursion = std::stoi(m[4]);
    return s;
}

ModelConfig model_config_from(const KeyValues& kv) {
    const std::int64_t version = kv.get_int("config_version");
    if (version != kConfigVersion) {
        throw ConfigError("unsupported config_version " + std::to_string(version) + " (expected " +
                          std::to_string(kConfigVersion) + ")");
    }
    ModelConfig cfg;
    cfg.input_channels = kv.get_int("input_channels", cfg.input_channels);
    cfg.input_height = kv.get_int("input_height", cfg.input_height);
    cfg.input_width = kv.get_int("input_width", cfg.input_width);
    cfg.stem_channels = kv.get_int("stem_channels", cfg.stem_channels);
    cfg.reduction = static_cast<int>(kv.get_int("reduction", cfg.reduction));
    cfg.recursion = static_cast<int>(kv.get_int("recursion", cfg.recursion));
    cfg.dropout_rate = kv.get_double("dropout_rate", cfg.dropout_rate);
    cfg.num_classes = kv.get_int("num_classes", cfg.num_classes);
    cfg.depthwise_kernel = static_cast<int>(kv.get_int("depthwise_kernel", cfg.depthwise_kernel));
    cfg.excitation_floor = kv.get_int("excitation_floor", cfg.excitation_floor);
    const std::string stages = kv.get_string("stages");
    std::stringstream ss(stages);
    std::string item;
    while (std::getline(ss, item, ',')) cfg.stages.push_back(parse_stage(item));
    validate(cfg);
    return cfg;
}

void model_config_to(const ModelConfig& cfg, KeyValues& kv) {
    kv.set("config_version", std::to_string(kConfigVersion));
    kv.set("input_channels", std::to_string(cfg.input_channels));
    kv.set("input_height", std::to_string(cfg.input_height));
    kv.set("input_width", std::to_string(cfg.input_width));
    kv.set("stem_channels", std::to_string(cfg.stem_channels));
    std::string stages;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
        if (i) stages += ", ";
        stages += format_stage(cfg.stages[i]);
    }
    kv.set("stages", stages);
    kv.set("reduction", std::to_string(cfg.reduction));
    kv.set("recursion", std::to_string(cfg.recursion));
    kv.set("dropout_rate", format_double(cfg.dropout_rate));
    kv.set("num_classes", std::to_string(cfg.num_classes));
    kv.set("depthwise_kernel", std::to_string(cfg.depthwise_kernel));
    kv.set("excitation_floor", std::to_string(cfg.excitation_floor));
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    out.push_back(&stem.weight);
    if (stem.bias) out.push_back(&*stem.bias);
    out.push_back(&stem_bn.gamma);
    out.push_back(&stem_bn.beta);
    for (BlockParams& b : blocks) append_parameters(b, out);
    out.push_back(&head_weight);
    out.push_back(&head_bias);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

std::vector<BatchNormParams*> Model::batchnorms() {
    std::vector<BatchNormParams*> out{&stem_bn};
    for (BlockParams& b : blocks) append_batchnorms(b, out);
    return out;
}

std::vector<const BatchNormParams*> Model::batchnorms() const {
    auto bs = const_cast<Model*>(this)->batchnorms();
    return {bs.begin(), bs.end()};
}

Index Model::downsample_factor() const {
    Index f = 1;
    for (const StageConfig& s : config.stages) f *= s.stride;
    return f;
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Rng rng(seed);
    Model m;
    m.config = cfg;
    m.stem = make_conv("stem.conv", cfg.input_channels, cfg.stem_channels, 3, ConvSpec{1, 1, 1}, false, rng);
    m.stem_bn = make_batchnorm("stem.bn", cfg.stem_channels);
    Index channels = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const StageConfig& st = cfg.stages[s];
        for (int b = 0; b < st.num_blocks; ++b) {
            BlockOptions o;
            o.in_channels = channels;
            o.out_channels = st.out_channels;
            o.stride = b == 0 ? st.stride : 1;
            o.recursion = cfg.stage_recursion(s);
            o.kernel = cfg.depthwise_kernel;
            o.reduction = cfg.reduction;
            o.excitation_floor = cfg.excitation_floor;
            o.dropout_rate = cfg.dropout_rate;
            m.blocks.push_back(make_block("blocks." + std::to_string(m.blocks.size()), o, rng));
            channels = st.out_channels;
        }
    }
    const double std_dev = std::sqrt(1.0 / static_cast<double>(channels));
    m.head_weight = Parameter{"head.weight", Tensor(Shape{cfg.num_classes, channels}), true};
    for (Index i = 0; i < m.head_weight.value.numel(); ++i) m.head_weight.value[i] = std_dev * rng.normal();
    m.head_bias = Parameter{"head.bias", Tensor(Shape{cfg.num_classes}), false};
    return m;
}

Var forward(Context& ctx, Model& model, Var batch) {
    const Tensor& x = batch.value();
    if (x.rank() != 4) throw InputError("forward: batch must be N x C x H x W, got " + x.shape().str());
    if (x.dim(1) != model.config.input_channels) {
        throw InputError("forward: batch has " + std::to_string(x.dim(1)) + " channels, model expects " +
                         std::to_string(model.config.input_channels));
    }
    Var h = ag::conv2d(batch, model.stem);
    h = ag::relu(ag::batchnorm2d(h, model.stem_bn, ctx.mode));
    for (BlockParams& b : model.blocks) h = dfs_block_forward(ctx, h, b);
    Var pooled = ag::adaptive_avg_pool_1x1(h);
    Tape& t = ctx.tape;
    return ag::linear(pooled, t.param(model.head_weight), t.param(model.head_bias));
}

Tensor infer(Model& model, const Tensor& batch) {
    Tape tape(false);
    Context ctx{tape, Mode::Infer, nullptr};
    return forward(ctx, model, tape.input(batch)).value();
}

std::vector<int> predict(const Tensor& logits) {
    if (logits.rank() != 2) throw InputError("predict: logits must be N x c, got " + logits.shape().str());
    const Index n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        for (Index j = 1; j < c; ++j) {
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        }
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

}  // namespace dt
