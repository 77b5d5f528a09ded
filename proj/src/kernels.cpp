#include "deeptraverse/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "deeptraverse/errors.hpp"

namespace dt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using StridedVec = Eigen::Map<const Eigen::VectorXd, 0, Eigen::InnerStride<>>;

// Eigen reductions are vectorized with a fixed association order, so results
// stay deterministic while avoiding a serial dependency chain.
inline double vsum(const double* p, Index n) { return n > 0 ? ConstMapVec(p, n).sum() : 0.0; }
inline double vdot(const double* a, const double* b, Index n) {
    return n > 0 ? ConstMapVec(a, n).dot(ConstMapVec(b, n)) : 0.0;
}

std::string dim_msg(const char* name, Index got, Index want) {
    return std::string("conv2d: ") + name + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

struct ConvGeom {
    Index n, cin, h, w;
    Index cout, kh, kw;
    Index oh, ow;
    Index stride, pad, groups;
    Index cin_g, cout_g;
    bool depthwise;
    bool pointwise_plain;  // 1x1, stride 1, no padding: im2col is the identity
};

ConvGeom make_geom(const Shape& xs, const Shape& ws, ConvSpec spec) {
    const Shape out = conv2d_output_shape(xs, ws, spec);
    ConvGeom g{};
    g.n = xs[0];
    g.cin = xs[1];
    g.h = xs[2];
    g.w = xs[3];
    g.cout = ws[0];
    g.kh = ws[2];
    g.kw = ws[3];
    g.oh = out[2];
    g.ow = out[3];
    g.stride = spec.stride;
    g.pad = spec.padding;
    g.groups = spec.groups;
    g.cin_g = g.cin / g.groups;
    g.cout_g = g.cout / g.groups;
    g.depthwise = g.groups == g.cin && g.groups == g.cout;
    g.pointwise_plain = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    return g;
}

// Output columns [lo, hi) for which input column ow*stride - pad + kx is in
// bounds.
inline void valid_range(Index kx, Index stride, Index pad, Index in_extent, Index out_extent, Index& lo,
                        Index& hi) {
    // smallest ow with ow*stride >= pad - kx
    const Index need = pad - kx;
    lo = need <= 0 ? 0 : (need + stride - 1) / stride;
    // largest ow with ow*stride <= in_extent - 1 + pad - kx
    const Index top = in_extent - 1 + pad - kx;
    hi = top < 0 ? 0 : std::min(out_extent, top / stride + 1);
    if (lo > hi) lo = hi;
}

void im2col(const double* x, const ConvGeom& g, Index c0, double* col) {
    const Index p = g.oh * g.ow;
    for (Index c = 0; c < g.cin_g; ++c) {
        const double* plane = x + (c0 + c) * g.h * g.w;
        for (Index ky = 0; ky < g.kh; ++ky) {
            for (Index kx = 0; kx < g.kw; ++kx) {
                double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
                Index lo, hi;
                valid_range(kx, g.stride, g.pad, g.w, g.ow, lo, hi);
                for (Index oy = 0; oy < g.oh; ++oy) {
                    double* dst = row + oy * g.ow;
                    const Index iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.ow, 0.0);
                        continue;
                    }
                    const double* src = plane + iy * g.w - g.pad + kx;
                    std::fill(dst, dst + lo, 0.0);
                    for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
                    std::fill(dst + hi, dst + g.ow, 0.0);
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeom& g, Index c0, double* x) {
    const Index p = g.oh * g.ow;
    for (Index c = 0; c < g.cin_g; ++c) {
        double* plane = x + (c0 + c) * g.h * g.w;
        for (Index ky = 0; ky < g.kh; ++ky) {
            for (Index kx = 0; kx < g.kw; ++kx) {
                const double* row = col + ((c * g.kh + ky) * g.kw + kx) * p;
                Index lo, hi;
                valid_range(kx, g.stride, g.pad, g.w, g.ow, lo, hi);
                for (Index oy = 0; oy < g.oh; ++oy) {
                    const Index iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    const double* src = row + oy * g.ow;
                    double* dst = plane + iy * g.w - g.pad + kx;
                    for (Index ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
                }
            }
        }
    }
}

// Copies an h x w plane into the interior of a zero-bordered
// (h + 2 pad) x (w + 2 pad) buffer, so the tap loops need no bounds checks.
void pad_plane(const double* src, Index h, Index w, Index pad, double* dst) {
    const Index pw = w + 2 * pad;
    std::fill(dst, dst + pad * pw, 0.0);
    for (Index y = 0; y < h; ++y) {
        double* row = dst + (y + pad) * pw;
        std::fill(row, row + pad, 0.0);
        std::copy(src + y * w, src + (y + 1) * w, row + pad);
        std::fill(row + pad + w, row + pw, 0.0);
    }
    std::fill(dst + (h + pad) * pw, dst + (h + 2 * pad) * pw, 0.0);
}

// 3x3 taps summed in row-major tap order, matching the generic loop.
template <int S>
void depthwise3x3_plane(const double* __restrict buf, Index pw, const double* __restrict k, Index oh, Index ow,
                        double* __restrict out) {
    const double k0 = k[0], k1 = k[1], k2 = k[2], k3 = k[3], k4 = k[4], k5 = k[5], k6 = k[6], k7 = k[7], k8 = k[8];
    for (Index oy = 0; oy < oh; ++oy) {
        const double* r0 = buf + (oy * S) * pw;
        const double* r1 = r0 + pw;
        const double* r2 = r1 + pw;
        double* orow = out + oy * ow;
        for (Index ox = 0; ox < ow; ++ox) {
            const Index i = ox * S;
            double acc = 0.0;
            acc += k0 * r0[i];
            acc += k1 * r0[i + 1];
            acc += k2 * r0[i + 2];
            acc += k3 * r1[i];
            acc += k4 * r1[i + 1];
            acc += k5 * r1[i + 2];
            acc += k6 * r2[i];
            acc += k7 * r2[i + 1];
            acc += k8 * r2[i + 2];
            orow[ox] = acc;
        }
    }
}

void depthwise_forward(const Tensor& x, const Tensor& w, const ConvGeom& g, Tensor& out) {
    const Index pw = g.w + 2 * g.pad;
    Buffer buf(static_cast<std::size_t>((g.h + 2 * g.pad) * pw));
    for (Index n = 0; n < g.n; ++n) {
        for (Index c = 0; c < g.cin; ++c) {
            pad_plane(x.data() + (n * g.cin + c) * g.h * g.w, g.h, g.w, g.pad, buf.data());
            double* o = out.data() + (n * g.cout + c) * g.oh * g.ow;
            const double* k = w.data() + c * g.kh * g.kw;
            if (g.kh == 3 && g.kw == 3 && g.stride == 1) {
                depthwise3x3_plane<1>(buf.data(), pw, k, g.oh, g.ow, o);
                continue;
            }
            if (g.kh == 3 && g.kw == 3 && g.stride == 2) {
                depthwise3x3_plane<2>(buf.data(), pw, k, g.oh, g.ow, o);
                continue;
            }
            for (Index oy = 0; oy < g.oh; ++oy) {
                double* orow = o + oy * g.ow;
                std::fill(orow, orow + g.ow, 0.0);
                for (Index ky = 0; ky < g.kh; ++ky) {
                    const double* prow = buf.data() + (oy * g.stride + ky) * pw;
                    for (Index kx = 0; kx < g.kw; ++kx) {
                        const double wv = k[ky * g.kw + kx];
                        const double* src = prow + kx;
                        if (g.stride == 1) {
                            for (Index ox = 0; ox < g.ow; ++ox) orow[ox] += wv * src[ox];
                        } else {
                            for (Index ox = 0; ox < g.ow; ++ox) orow[ox] += wv * src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

void depthwise_grad_input(const Tensor& gout, const Tensor& w, const ConvGeom& g, Tensor& gin) {
    const Index pw = g.w + 2 * g.pad;
    Buffer buf(static_cast<std::size_t>((g.h + 2 * g.pad) * pw));
    for (Index n = 0; n < g.n; ++n) {
        for (Index c = 0; c < g.cin; ++c) {
            std::fill(buf.begin(), buf.end(), 0.0);
            const double* go = gout.data() + (n * g.cout + c) * g.oh * g.ow;
            const double* k = w.data() + c * g.kh * g.kw;
            for (Index oy = 0; oy < g.oh; ++oy) {
                const double* grow = go + oy * g.ow;
                for (Index ky = 0; ky < g.kh; ++ky) {
                    double* prow = buf.data() + (oy * g.stride + ky) * pw;
                    for (Index kx = 0; kx < g.kw; ++kx) {
                        const double wv = k[ky * g.kw + kx];
                        double* dst = prow + kx;
                        if (g.stride == 1) {
                            for (Index ox = 0; ox < g.ow; ++ox) dst[ox] += wv * grow[ox];
                        } else {
                            for (Index ox = 0; ox < g.ow; ++ox) dst[ox * g.stride] += wv * grow[ox];
                        }
                    }
                }
            }
            double* gi = gin.data() + (n * g.cin + c) * g.h * g.w;
            for (Index y = 0; y < g.h; ++y) {
                const double* row = buf.data() + (y + g.pad) * pw + g.pad;
                std::copy(row, row + g.w, gi + y * g.w);
            }
        }
    }
}

void depthwise_grad_weight(const Tensor& gout, const Tensor& x, const ConvGeom& g, Tensor& gw) {
    const Index pw = g.w + 2 * g.pad;
    Buffer buf(static_cast<std::size_t>((g.h + 2 * g.pad) * pw));
    for (Index n = 0; n < g.n; ++n) {
        for (Index c = 0; c < g.cin; ++c) {
            pad_plane(x.data() + (n * g.cin + c) * g.h * g.w, g.h, g.w, g.pad, buf.data());
            const double* go = gout.data() + (n * g.cout + c) * g.oh * g.ow;
            double* k = gw.data() + c * g.kh * g.kw;
            for (Index ky = 0; ky < g.kh; ++ky) {
                for (Index kx = 0; kx < g.kw; ++kx) {
                    double acc = 0.0;
                    for (Index oy = 0; oy < g.oh; ++oy) {
                        const double* src = buf.data() + (oy * g.stride + ky) * pw + kx;
                        const double* grow = go + oy * g.ow;
                        if (g.stride == 1) {
                            acc += vdot(grow, src, g.ow);
                        } else {
                            acc += ConstMapVec(grow, g.ow).dot(StridedVec(src, g.ow, Eigen::InnerStride<>(g.stride)));
                        }
                    }
                    k[ky * g.kw + kx] += acc;
                }
            }
        }
    }
}

void require_channel_vector(const Tensor& v, Index c, const char* what) {
    if (v.numel() != c) {
        throw ConfigError(std::string(what) + ": expected " + std::to_string(c) + " channel values, got " +
                          std::to_string(v.numel()));
    }
}

}  // namespace

Shape conv2d_output_shape(const Shape& x, const Shape& w, ConvSpec spec) {
    if (x.rank() != 4) throw ConfigError("conv2d: input must be N x C x H x W, got " + x.str());
    if (w.rank() != 4) throw ConfigError("conv2d: weights must be C_out x C_in/groups x k x k, got " + w.str());
    if (spec.stride < 1) throw ConfigError("conv2d: stride must be >= 1, got " + std::to_string(spec.stride));
    if (spec.padding < 0) throw ConfigError("conv2d: padding must be >= 0, got " + std::to_string(spec.padding));
    if (spec.groups < 1) throw ConfigError("conv2d: groups must be >= 1, got " + std::to_string(spec.groups));
    const Index cin = x[1];
    const Index cout = w[0];
    if (cin % spec.groups != 0) throw ConfigError(dim_msg("input channels (mod groups)", cin % spec.groups, 0));
    if (cout % spec.groups != 0) throw ConfigError(dim_msg("output channels (mod groups)", cout % spec.groups, 0));
    if (w[1] != cin / spec.groups) throw ConfigError(dim_msg("weight input-channel extent", w[1], cin / spec.groups));
    const Index hp = x[2] + 2 * spec.padding - w[2];
    const Index wp = x[3] + 2 * spec.padding - w[3];
    if (hp < 0) throw ConfigError("conv2d: kernel height " + std::to_string(w[2]) + " exceeds padded input height");
    if (wp < 0) throw ConfigError("conv2d: kernel width " + std::to_string(w[3]) + " exceeds padded input width");
    return Shape{x[0], cout, hp / spec.stride + 1, wp / spec.stride + 1};
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvSpec spec) {
    const ConvGeom g = make_geom(x.shape(), w.shape(), spec);
    Tensor out = Tensor::uninitialized(Shape{g.n, g.cout, g.oh, g.ow});
    if (bias) require_channel_vector(*bias, g.cout, "conv2d bias");
    if (g.depthwise) {
        depthwise_forward(x, w, g, out);
    } else {
        const Index p = g.oh * g.ow;
        const Index k = g.cin_g * g.kh * g.kw;
        Buffer col(g.pointwise_plain ? 0 : static_cast<std::size_t>(k * p));
        for (Index n = 0; n < g.n; ++n) {
            const double* xn = x.data() + n * g.cin * g.h * g.w;
            for (Index grp = 0; grp < g.groups; ++grp) {
                const double* src;
                if (g.pointwise_plain) {
                    src = xn + grp * g.cin_g * g.h * g.w;
                } else {
                    im2col(xn, g, grp * g.cin_g, col.data());
                    src = col.data();
                }
                ConstMapMat wm(w.data() + grp * g.cout_g * k, g.cout_g, k);
                ConstMapMat cm(src, k, p);
                MapMat om(out.data() + (n * g.cout + grp * g.cout_g) * p, g.cout_g, p);
                om.noalias() = wm * cm;
            }
        }
    }
    if (bias) {
        const Index p = g.oh * g.ow;
        for (Index n = 0; n < g.n; ++n) {
            for (Index c = 0; c < g.cout; ++c) {
                double* o = out.data() + (n * g.cout + c) * p;
                const double b = (*bias)[c];
                for (Index i = 0; i < p; ++i) o[i] += b;
            }
        }
    }
    return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape, ConvSpec spec) {
    const ConvGeom g = make_geom(x_shape, w.shape(), spec);
    if (g.depthwise) {
        Tensor gin = Tensor::uninitialized(x_shape);
        depthwise_grad_input(grad_out, w, g, gin);
        return gin;
    }
    Tensor gin = g.pointwise_plain ? Tensor::uninitialized(x_shape) : Tensor(x_shape);
    const Index p = g.oh * g.ow;
    const Index k = g.cin_g * g.kh * g.kw;
    Buffer col(g.pointwise_plain ? 0 : static_cast<std::size_t>(k * p));
    for (Index n = 0; n < g.n; ++n) {
        double* gx = gin.data() + n * g.cin * g.h * g.w;
        for (Index grp = 0; grp < g.groups; ++grp) {
            ConstMapMat wm(w.data() + grp * g.cout_g * k, g.cout_g, k);
            ConstMapMat gm(grad_out.data() + (n * g.cout + grp * g.cout_g) * p, g.cout_g, p);
            if (g.pointwise_plain) {
                MapMat dst(gx + grp * g.cin_g * g.h * g.w, k, p);
                dst.noalias() = wm.transpose() * gm;
            } else {
                MapMat cm(col.data(), k, p);
                cm.noalias() = wm.transpose() * gm;
                col2im_add(col.data(), g, grp * g.cin_g, gx);
            }
        }
    }
    return gin;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x, const Shape& w_shape, ConvSpec spec) {
    const ConvGeom g = make_geom(x.shape(), w_shape, spec);
    Tensor gw(w_shape);
    if (g.depthwise) {
        depthwise_grad_weight(grad_out, x, g, gw);
        return gw;
    }
    const Index p = g.oh * g.ow;
    const Index k = g.cin_g * g.kh * g.kw;
    Buffer col(g.pointwise_plain ? 0 : static_cast<std::size_t>(k * p));
    for (Index n = 0; n < g.n; ++n) {
        const double* xn = x.data() + n * g.cin * g.h * g.w;
        for (Index grp = 0; grp < g.groups; ++grp) {
            const double* src;
            if (g.pointwise_plain) {
                src = xn + grp * g.cin_g * g.h * g.w;
            } else {
                im2col(xn, g, grp * g.cin_g, col.data());
                src = col.data();
            }
            ConstMapMat cm(src, k, p);
            ConstMapMat gm(grad_out.data() + (n * g.cout + grp * g.cout_g) * p, g.cout_g, p);
            MapMat wm(gw.data() + grp * g.cout_g * k, g.cout_g, k);
            wm.noalias() += gm * cm.transpose();
        }
    }
    return gw;
}

Tensor conv2d_grad_bias(const Tensor& grad_out) {
    require_nchw(grad_out, "conv2d_grad_bias");
    const Index n = grad_out.dim(0), c = grad_out.dim(1), p = grad_out.dim(2) * grad_out.dim(3);
    Tensor gb(Shape{c});
    for (Index i = 0; i < n; ++i) {
        for (Index ch = 0; ch < c; ++ch) {
            gb[ch] += vsum(grad_out.data() + (i * c + ch) * p, p);
        }
    }
    return gb;
}

Tensor batchnorm2d_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         BatchStats& stats) {
    require_nchw(x, "batchnorm2d");
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    require_channel_vector(gamma, c, "batchnorm2d gamma");
    require_channel_vector(beta, c, "batchnorm2d beta");
    const double m = static_cast<double>(n * p);
    if (n * p < 2) throw ConfigError("batchnorm2d: training mode needs at least 2 values per channel");
    stats.mean.assign(static_cast<std::size_t>(c), 0.0);
    stats.var.assign(static_cast<std::size_t>(c), 0.0);
    stats.inv_std.assign(static_cast<std::size_t>(c), 0.0);
    Tensor out = Tensor::uninitialized(x.shape());
    for (Index ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (Index i = 0; i < n; ++i) sum += vsum(x.data() + (i * c + ch) * p, p);
        const double mean = sum / m;
        double sq = 0.0;
        for (Index i = 0; i < n; ++i) {
            sq += (ConstMapVec(x.data() + (i * c + ch) * p, p).array() - mean).square().sum();
        }
        const double var = sq / m;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        stats.mean[ch] = mean;
        stats.var[ch] = var;
        stats.inv_std[ch] = inv_std;
        const double scale = gamma[ch] * inv_std;
        const double shift = beta[ch];
        for (Index i = 0; i < n; ++i) {
            const double* src = x.data() + (i * c + ch) * p;
            double* dst = out.data() + (i * c + ch) * p;
            for (Index j = 0; j < p; ++j) dst[j] = (src[j] - mean) * scale + shift;
        }
    }
    return out;
}

Tensor batchnorm2d_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                         const Tensor& running_var, double eps) {
    require_nchw(x, "batchnorm2d");
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    require_channel_vector(gamma, c, "batchnorm2d gamma");
    require_channel_vector(beta, c, "batchnorm2d beta");
    require_channel_vector(running_mean, c, "batchnorm2d running_mean");
    require_channel_vector(running_var, c, "batchnorm2d running_var");
    Tensor out = Tensor::uninitialized(x.shape());
    for (Index ch = 0; ch < c; ++ch) {
        const double scale = gamma[ch] / std::sqrt(running_var[ch] + eps);
        const double mean = running_mean[ch];
        const double shift = beta[ch];
        for (Index i = 0; i < n; ++i) {
            const double* src = x.data() + (i * c + ch) * p;
            double* dst = out.data() + (i * c + ch) * p;
            for (Index j = 0; j < p; ++j) dst[j] = (src[j] - mean) * scale + shift;
        }
    }
    return out;
}

BatchNormGrads batchnorm2d_train_backward(const Tensor& grad_out, const Tensor& x, const Tensor& gamma,
                                          const BatchStats& stats) {
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    const double m = static_cast<double>(n * p);
    BatchNormGrads g{Tensor::uninitialized(x.shape()), Tensor(Shape{c}), Tensor(Shape{c})};
    for (Index ch = 0; ch < c; ++ch) {
        const double mean = stats.mean[ch];
        const double inv_std = stats.inv_std[ch];
        double sum_dy = 0.0, sum_dy_x = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double* dy = grad_out.data() + (i * c + ch) * p;
            const double* src = x.data() + (i * c + ch) * p;
            sum_dy += vsum(dy, p);
            sum_dy_x += (ConstMapVec(dy, p).array() * (ConstMapVec(src, p).array() - mean)).sum();
        }
        const double sum_dy_xhat = sum_dy_x * inv_std;
        g.gamma[ch] = sum_dy_xhat;
        g.beta[ch] = sum_dy;
        const double k = gamma[ch] * inv_std / m;
        const double mean_dy = sum_dy;
        const double proj = sum_dy_xhat;
        for (Index i = 0; i < n; ++i) {
            const double* dy = grad_out.data() + (i * c + ch) * p;
            const double* src = x.data() + (i * c + ch) * p;
            double* dx = g.input.data() + (i * c + ch) * p;
            for (Index j = 0; j < p; ++j) {
                const double xhat = (src[j] - mean) * inv_std;
                dx[j] = k * (m * dy[j] - mean_dy - xhat * proj);
            }
        }
    }
    return g;
}

BatchNormGrads batchnorm2d_infer_backward(const Tensor& grad_out, const Tensor& x, const Tensor& gamma,
                                          const Tensor& running_mean, const Tensor& running_var, double eps) {
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    BatchNormGrads g{Tensor::uninitialized(x.shape()), Tensor(Shape{c}), Tensor(Shape{c})};
    for (Index ch = 0; ch < c; ++ch) {
        const double inv_std = 1.0 / std::sqrt(running_var[ch] + eps);
        const double scale = gamma[ch] * inv_std;
        const double mean = running_mean[ch];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double* dy = grad_out.data() + (i * c + ch) * p;
            const double* src = x.data() + (i * c + ch) * p;
            double* dx = g.input.data() + (i * c + ch) * p;
            for (Index j = 0; j < p; ++j) {
                sum_dy += dy[j];
                sum_dy_xhat += dy[j] * (src[j] - mean) * inv_std;
                dx[j] = dy[j] * scale;
            }
        }
        g.gamma[ch] = sum_dy_xhat;
        g.beta[ch] = sum_dy;
    }
    return g;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::uninitialized(x.shape());
    const double* src = x.data();
    double* dst = out.data();
    for (Index i = 0; i < x.numel(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& y) {
    Tensor g = Tensor::uninitialized(y.shape());
    double* dst = g.data();
    const double* go = grad_out.data();
    const double* v = y.data();
    for (Index i = 0; i < y.numel(); ++i) dst[i] = v[i] > 0.0 ? go[i] : 0.0;
    return g;
}

void relu_backward_inplace(Tensor& grad, const Tensor& y) {
    require_same_shape(grad, y, "relu_backward");
    double* g = grad.data();
    const double* v = y.data();
    for (Index i = 0; i < y.numel(); ++i) g[i] = v[i] > 0.0 ? g[i] : 0.0;
}

Tensor sigmoid(const Tensor& x) {
    // Clamped to the open interval: in fp64 the exact formula rounds to 1
    // beyond x ~ 36.7 and to 0 below x ~ -745.
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    constexpr double hi = 1.0 - 0x1.0p-53;
    Tensor out = Tensor::uninitialized(x.shape());
    for (Index i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        double s;
        if (v >= 0.0) {
            s = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            s = e / (1.0 + e);
        }
        out[i] = std::clamp(s, lo, hi);
    }
    return out;
}

Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y) {
    Tensor g = Tensor::uninitialized(y.shape());
    for (Index i = 0; i < y.numel(); ++i) g[i] = grad_out[i] * y[i] * (1.0 - y[i]);
    return g;
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng, std::vector<std::uint8_t>& mask) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    mask.clear();
    if (mode == Mode::Infer || rate == 0.0) return x;
    const double scale = 1.0 / (1.0 - rate);
    Tensor out = Tensor::uninitialized(x.shape());
    mask.resize(static_cast<std::size_t>(x.numel()));
    for (Index i = 0; i < x.numel(); ++i) {
        const bool keep = rng.uniform() >= rate;
        mask[static_cast<std::size_t>(i)] = keep ? 1 : 0;
        out[i] = keep ? x[i] * scale : 0.0;
    }
    return out;
}

Tensor dropout_backward(const Tensor& grad_out, double rate, const std::vector<std::uint8_t>& mask) {
    if (mask.empty()) return grad_out;
    const double scale = 1.0 / (1.0 - rate);
    Tensor g = Tensor::uninitialized(grad_out.shape());
    for (Index i = 0; i < g.numel(); ++i) g[i] = mask[static_cast<std::size_t>(i)] ? grad_out[i] * scale : 0.0;
    return g;
}

Tensor adaptive_avg_pool_1x1(const Tensor& x) {
    require_nchw(x, "adaptive_avg_pool_1x1");
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    Tensor out = Tensor::uninitialized(Shape{n, c, 1, 1});
    // Averaging deviations from the first element makes a constant plane
    // pool to exactly that constant.
    for (Index i = 0; i < n * c; ++i) {
        const double* src = x.data() + i * p;
        out[i] = src[0] + (ConstMapVec(src, p).array() - src[0]).sum() / static_cast<double>(p);
    }
    return out;
}

Tensor adaptive_avg_pool_1x1_backward(const Tensor& grad_out, const Shape& x_shape) {
    const Index nc = x_shape[0] * x_shape[1], p = x_shape[2] * x_shape[3];
    Tensor g = Tensor::uninitialized(x_shape);
    const double inv = 1.0 / static_cast<double>(p);
    for (Index i = 0; i < nc; ++i) {
        const double v = grad_out[i] * inv;
        double* dst = g.data() + i * p;
        for (Index j = 0; j < p; ++j) dst[j] = v;
    }
    return g;
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
    require_nchw(x, "channel_scale");
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    if (s.rank() != 4 || s.dim(0) != n || s.dim(1) != c || s.dim(2) != 1 || s.dim(3) != 1) {
        throw ConfigError("channel_scale: scale shape " + s.shape().str() + " does not match input " +
                          x.shape().str());
    }
    Tensor out = Tensor::uninitialized(x.shape());
    for (Index i = 0; i < n * c; ++i) {
        const double v = s[i];
        const double* src = x.data() + i * p;
        double* dst = out.data() + i * p;
        for (Index j = 0; j < p; ++j) dst[j] = src[j] * v;
    }
    return out;
}

Tensor channel_scale_grad_x(const Tensor& grad_out, const Tensor& s) {
    return channel_scale(grad_out, s);
}

Tensor channel_scale_grad_s(const Tensor& grad_out, const Tensor& x) {
    const Index n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
    Tensor g = Tensor::uninitialized(Shape{n, c, 1, 1});
    for (Index i = 0; i < n * c; ++i) {
        g[i] = vdot(grad_out.data() + i * p, x.data() + i * p, p);
    }
    return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::uninitialized(a.shape());
    for (Index i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

void add_inplace(Tensor& acc, const Tensor& b) {
    require_same_shape(acc, b, "add_inplace");
    double* dst = acc.data();
    const double* src = b.data();
    for (Index i = 0; i < acc.numel(); ++i) dst[i] += src[i];
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::uninitialized(a.shape());
    for (Index i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

namespace {

Index linear_features(const Tensor& x, const Tensor& w) {
    if (x.rank() < 2) throw ConfigError("linear: input must have a batch axis, got " + x.shape().str());
    if (w.rank() != 2) throw ConfigError("linear: weights must be out x in, got " + w.shape().str());
    const Index k = x.numel() / x.dim(0);
    if (k != w.dim(1)) {
        throw ConfigError("linear: input features " + std::to_string(k) + " do not match weight columns " +
                          std::to_string(w.dim(1)));
    }
    return k;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
    const Index k = linear_features(x, w);
    const Index n = x.dim(0), m = w.dim(0);
    if (bias) require_channel_vector(*bias, m, "linear bias");
    Tensor out = Tensor::uninitialized(Shape{n, m});
    // One dot product per output keeps each row independent of the batch size;
    // a batched GEMM switches kernels (and summation order) with n.
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < m; ++j) {
            out[i * m + j] = vdot(x.data() + i * k, w.data() + j * k, k) + (bias ? (*bias)[j] : 0.0);
        }
    }
    return out;
}

Tensor linear_grad_input(const Tensor& grad_out, const Tensor& w, const Shape& x_shape) {
    const Index n = x_shape[0], k = w.dim(1), m = w.dim(0);
    Tensor g = Tensor::uninitialized(x_shape);
    MapMat(g.data(), n, k).noalias() = ConstMapMat(grad_out.data(), n, m) * ConstMapMat(w.data(), m, k);
    return g;
}

Tensor linear_grad_weight(const Tensor& grad_out, const Tensor& x) {
    const Index n = x.dim(0), k = x.numel() / n, m = grad_out.dim(1);
    Tensor g = Tensor::uninitialized(Shape{m, k});
    MapMat(g.data(), m, k).noalias() =
        ConstMapMat(grad_out.data(), n, m).transpose() * ConstMapMat(x.data(), n, k);
    return g;
}

Tensor linear_grad_bias(const Tensor& grad_out) {
    const Index n = grad_out.dim(0), m = grad_out.dim(1);
    Tensor g(Shape{m});
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < m; ++j) g[j] += grad_out[i * m + j];
    }
    return g;
}

namespace {

void check_logits(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ConfigError("softmax_cross_entropy: logits must be N x c, got " + logits.shape().str());
    if (static_cast<Index>(labels.size()) != logits.dim(0)) {
        throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.dim(0)) + " rows");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= logits.dim(1)) {
            throw InputError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(logits.dim(1)) + ")");
        }
    }
}

}  // namespace

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    check_logits(logits, labels);
    const Index n = logits.dim(0), c = logits.dim(1);
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double* row = logits.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (Index j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        total += std::log(s) - (row[labels[static_cast<std::size_t>(i)]] - mx);
    }
    return total / static_cast<double>(n);
}

Tensor softmax_cross_entropy_grad(const Tensor& logits, std::span<const int> labels) {
    check_logits(logits, labels);
    const Index n = logits.dim(0), c = logits.dim(1);
    Tensor g = Tensor::uninitialized(logits.shape());
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
        const double* row = logits.data() + i * c;
        double* dst = g.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (Index j = 0; j < c; ++j) {
            dst[j] = std::exp(row[j] - mx);
            s += dst[j];
        }
        for (Index j = 0; j < c; ++j) dst[j] = dst[j] / s * inv_n;
        dst[labels[static_cast<std::size_t>(i)]] -= inv_n;
    }
    return g;
}

}  // namespace dt
