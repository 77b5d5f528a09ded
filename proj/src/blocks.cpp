#include "deeptraverse/blocks.hpp"

#include <algorithm>

#include "deeptraverse/errors.hpp"

namespace dt {

namespace {

void append_conv(ConvParams& c, std::vector<Parameter*>& out) {
    out.push_back(&c.weight);
    if (c.bias) out.push_back(&*c.bias);
}

void append_bn(BatchNormParams& b, std::vector<Parameter*>& out) {
    out.push_back(&b.gamma);
    out.push_back(&b.beta);
}

Index spatial_out(Index in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

}  // namespace

Index excitation_width(Index channels, int reduction, Index floor) {
    if (reduction < 1) throw ConfigError("reduction ratio must be >= 1, got " + std::to_string(reduction));
    if (floor < 1) throw ConfigError("excitation floor must be >= 1, got " + std::to_string(floor));
    return std::max(channels / reduction, floor);
}

ExtractParams make_extract(const std::string& name, Index in_channels, Index out_channels, int kernel, int stride,
                           double dropout_rate, Rng& rng) {
    ExtractParams p;
    const ConvSpec dw{stride, (kernel - 1) / 2, static_cast<int>(in_channels)};
    p.depthwise = make_conv(name + ".depthwise", in_channels, in_channels, kernel, dw, false, rng);
    p.bn1 = make_batchnorm(name + ".bn1", in_channels);
    p.dropout_rate = dropout_rate;
    p.pointwise = make_conv(name + ".pointwise", in_channels, out_channels, 1, ConvSpec{}, false, rng);
    p.bn2 = make_batchnorm(name + ".bn2", out_channels);
    return p;
}

RecursiveParams make_recursive(const std::string& name, Index channels, int kernel, Rng& rng) {
    RecursiveParams p;
    const ConvSpec dw{1, (kernel - 1) / 2, static_cast<int>(channels)};
    p.depthwise = make_conv(name + ".depthwise", channels, channels, kernel, dw, false, rng);
    p.bn1 = make_batchnorm(name + ".bn1", channels);
    p.pointwise = make_conv(name + ".pointwise", channels, channels, 1, ConvSpec{}, false, rng);
    p.bn2 = make_batchnorm(name + ".bn2", channels, 0.0);
    return p;
}

BacktrackParams make_backtrack(const std::string& name, Index channels, int reduction, Index excitation_floor,
                               Rng& rng) {
    BacktrackParams p;
    p.reduction = reduction;
    const Index hidden = excitation_width(channels, reduction, excitation_floor);
    p.reduce = make_conv(name + ".reduce", channels, hidden, 1, ConvSpec{}, true, rng);
    p.expand = make_conv(name + ".expand", hidden, channels, 1, ConvSpec{}, true, rng);
    return p;
}

ShortcutParams make_shortcut(const std::string& name, Index in_channels, Index out_channels, int stride, Rng& rng) {
    ShortcutParams p;
    p.identity = in_channels == out_channels && stride == 1;
    if (!p.identity) {
        p.projection = make_conv(name + ".projection", in_channels, out_channels, 1, ConvSpec{stride, 0, 1}, false, rng);
        p.bn = make_batchnorm(name + ".bn", out_channels);
    }
    return p;
}

BlockParams make_block(const std::string& name, const BlockOptions& o, Rng& rng) {
    if (o.in_channels < 1) throw ConfigError(name + ": in_channels must be >= 1");
    if (o.out_channels < 1) throw ConfigError(name + ": out_channels must be >= 1");
    if (o.stride < 1) throw ConfigError(name + ": stride must be >= 1");
    if (o.recursion < 0) throw ConfigError(name + ": recursion must be >= 0");
    if (o.kernel < 1 || o.kernel % 2 == 0) {
        throw ConfigError(name + ": depthwise_kernel must be odd, got " + std::to_string(o.kernel));
    }
    if (!(o.dropout_rate >= 0.0 && o.dropout_rate < 1.0)) throw ConfigError(name + ": dropout_rate must be in [0, 1)");
    // Main branch: k x k, pad (k-1)/2, stride s. Shortcut: 1x1, pad 0, stride s.
    // Both give floor((H - 1) / s) + 1; check over a range of sizes anyway.
    for (Index h = 1; h <= 4 * o.stride + 4; ++h) {
        if (spatial_out(h, o.kernel, o.stride, (o.kernel - 1) / 2) != spatial_out(h, 1, o.stride, 0)) {
            throw ConfigError(name + ": shortcut and main branch disagree on spatial size");
        }
    }
    BlockParams p;
    p.in_channels = o.in_channels;
    p.out_channels = o.out_channels;
    p.stride = o.stride;
    p.recursion = o.recursion;
    p.extract = make_extract(name + ".explore.extract", o.in_channels, o.out_channels, o.kernel, o.stride,
                             o.dropout_rate, rng);
    p.recursive = make_recursive(name + ".explore.recursive", o.out_channels, o.kernel, rng);
    p.backtrack = make_backtrack(name + ".backtrack", o.out_channels, o.reduction, o.excitation_floor, rng);
    p.shortcut = make_shortcut(name + ".shortcut", o.in_channels, o.out_channels, o.stride, rng);
    return p;
}

Var extract_forward(Context& ctx, Var x, ExtractParams& p) {
    Var h = ag::conv2d(x, p.depthwise);
    h = ag::batchnorm2d(h, p.bn1, ctx.mode);
    h = ag::relu(h);
    if (ctx.mode == Mode::Train && p.dropout_rate > 0.0) {
        if (!ctx.rng) throw InternalError("training-mode dropout needs a random stream");
        h = ag::dropout(h, p.dropout_rate, ctx.mode, *ctx.rng);
    }
    h = ag::conv2d(h, p.pointwise);
    return ag::batchnorm2d(h, p.bn2, ctx.mode);
}

Var recursive_branch(Context& ctx, Var f, RecursiveParams& p) {
    Var h = ag::conv2d(f, p.depthwise);
    h = ag::batchnorm2d(h, p.bn1, ctx.mode);
    h = ag::relu(h);
    h = ag::conv2d(h, p.pointwise);
    return ag::batchnorm2d(h, p.bn2, ctx.mode);
}

Var dfs_eb_forward(Context& ctx, Var x, ExtractParams& extract, RecursiveParams& rec, int recursion) {
    if (recursion < 0) throw ConfigError("dfs_eb_forward: recursion must be >= 0");
    Var f = extract_forward(ctx, x, extract);
    if (recursion > 0 && f.value().dim(1) != rec.pointwise.out_channels()) {
        throw ConfigError("dfs_eb_forward: extract produces " + std::to_string(f.value().dim(1)) +
                          " channels, recursive branch expects " + std::to_string(rec.pointwise.out_channels()));
    }
    for (int i = 0; i < recursion; ++i) f = ag::add(f, recursive_branch(ctx, f, rec));
    return f;
}

Var dfs_bb_forward(Context& ctx, Var f, BacktrackParams& p, Var* attention) {
    require_nchw(f.value(), "dfs_bb_forward");
    if (f.value().dim(1) != p.channels()) {
        throw ConfigError("dfs_bb_forward: input has " + std::to_string(f.value().dim(1)) +
                          " channels, backtrack block expects " + std::to_string(p.channels()));
    }
    (void)ctx;
    Var z = ag::adaptive_avg_pool_1x1(f);
    Var s = ag::sigmoid(ag::conv2d(ag::relu(ag::conv2d(z, p.reduce)), p.expand));
    if (attention) *attention = s;
    return ag::channel_scale(f, s);
}

Var projection_shortcut(Context& ctx, Var x, ShortcutParams& p) {
    if (p.identity) return x;
    if (!p.projection || !p.bn) throw ConfigError("projection_shortcut: projection parameters missing");
    return ag::batchnorm2d(ag::conv2d(x, *p.projection), *p.bn, ctx.mode);
}

Var dfs_block_forward(Context& ctx, Var x, BlockParams& p) {
    require_nchw(x.value(), "dfs_block_forward");
    if (x.value().dim(1) != p.in_channels) {
        throw ConfigError("dfs_block_forward: input has " + std::to_string(x.value().dim(1)) +
                          " channels, block expects " + std::to_string(p.in_channels));
    }
    Var explored = dfs_eb_forward(ctx, x, p.extract, p.recursive, p.recursion);
    Var recalibrated = dfs_bb_forward(ctx, explored, p.backtrack);
    Var skip = projection_shortcut(ctx, x, p.shortcut);
    if (skip.value().shape() != recalibrated.value().shape()) {
        throw ConfigError("dfs_block_forward: shortcut shape " + skip.value().shape().str() +
                          " does not match main branch " + recalibrated.value().shape().str());
    }
    return ag::relu(ag::add(recalibrated, skip));
}

void append_parameters(ExtractParams& p, std::vector<Parameter*>& out) {
    append_conv(p.depthwise, out);
    append_bn(p.bn1, out);
    append_conv(p.pointwise, out);
    append_bn(p.bn2, out);
}

void append_parameters(RecursiveParams& p, std::vector<Parameter*>& out) {
    append_conv(p.depthwise, out);
    append_bn(p.bn1, out);
    append_conv(p.pointwise, out);
    append_bn(p.bn2, out);
}

void append_parameters(BacktrackParams& p, std::vector<Parameter*>& out) {
    append_conv(p.reduce, out);
    append_conv(p.expand, out);
}

void append_parameters(ShortcutParams& p, std::vector<Parameter*>& out) {
    if (p.projection) append_conv(*p.projection, out);
    if (p.bn) append_bn(*p.bn, out);
}

void append_parameters(BlockParams& p, std::vector<Parameter*>& out) {
    append_parameters(p.extract, out);
    append_parameters(p.recursive, out);
    append_parameters(p.backtrack, out);
    append_parameters(p.shortcut, out);
}

void append_batchnorms(BlockParams& p, std::vector<BatchNormParams*>& out) {
    out.push_back(&p.extract.bn1);
    out.push_back(&p.extract.bn2);
    out.push_back(&p.recursive.bn1);
    out.push_back(&p.recursive.bn2);
    if (p.shortcut.bn) out.push_back(&*p.shortcut.bn);
}

}  // namespace dt
