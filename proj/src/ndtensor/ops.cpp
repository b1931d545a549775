#include "petsynth/ndtensor/ops.hpp"

#include <cmath>
#include <string>

#include "petsynth/common/error.hpp"
#include "petsynth/kernels/conv.hpp"

namespace petsynth::nd {

namespace {

using kernels::ConvGeometry;
using kernels::Extent3;

void require_same_shape(const Graph &g, Var a, Var b, const char *op) {
    if (g.value(a).shape() != g.value(b).shape()) {
        throw DomainError(std::string(op) + ": shape mismatch between '" + g.op_name(a) + "' " +
                          shape_str(g.value(a).shape()) + " and '" + g.op_name(b) + "' " +
                          shape_str(g.value(b).shape()));
    }
}

void require_spatial(const Graph &g, Var x, const char *op) {
    const int r = g.value(x).rank();
    if (r != 4 && r != 5) {
        throw DomainError(std::string(op) + ": expected NCHW or NCDHW input, '" + g.op_name(x) + "' has shape " +
                          shape_str(g.value(x).shape()));
    }
}

Extent3 spatial_extent(const Shape &s) {
    if (s.size() == 4) return {1, s[2], s[3]};
    return {s[2], s[3], s[4]};
}

Extent3 kernel_extent(const Shape &w) {
    if (w.size() == 4) return {1, w[2], w[3]};
    return {w[2], w[3], w[4]};
}

Extent3 iso(int v, int rank) { return rank == 4 ? Extent3{1, v, v} : Extent3{v, v, v}; }
Extent3 iso_pad(int v, int rank) { return rank == 4 ? Extent3{0, v, v} : Extent3{v, v, v}; }

Shape with_spatial(std::int64_t n, std::int64_t c, const Extent3 &e, int rank) {
    if (rank == 4) return {n, c, e[1], e[2]};
    return {n, c, e[0], e[1], e[2]};
}

template <class Fwd, class Deriv>
Var unary(Graph &g, Var x, const char *op, Fwd fwd, Deriv deriv) {
    const Tensor &xv = g.value(x);
    Tensor y(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) y[i] = fwd(xv[i]);
    return g.record(op, std::move(y), {x}, [x, deriv](Graph &gr, std::int32_t self) {
        float *dx = gr.grad_ptr(x);
        if (!dx) return;
        const Tensor &xv = gr.value(x);
        const Tensor &yv = gr.value(Var{self});
        const Tensor &dy = gr.grad(Var{self});
        for (std::int64_t i = 0; i < xv.numel(); ++i) dx[i] += dy[i] * deriv(xv[i], yv[i]);
    });
}

} // namespace

Var add(Graph &g, Var a, Var b) {
    require_same_shape(g, a, b, "add");
    const Tensor &av = g.value(a);
    const Tensor &bv = g.value(b);
    Tensor y(av.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
    return g.record("add", std::move(y), {a, b}, [a, b](Graph &gr, std::int32_t self) {
        const Tensor &dy = gr.grad(Var{self});
        for (Var v : {a, b})
            if (float *d = gr.grad_ptr(v))
                for (std::int64_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
    });
}

Var sub(Graph &g, Var a, Var b) {
    require_same_shape(g, a, b, "sub");
    const Tensor &av = g.value(a);
    const Tensor &bv = g.value(b);
    Tensor y(av.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] - bv[i];
    return g.record("sub", std::move(y), {a, b}, [a, b](Graph &gr, std::int32_t self) {
        const Tensor &dy = gr.grad(Var{self});
        if (float *d = gr.grad_ptr(a))
            for (std::int64_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
        if (float *d = gr.grad_ptr(b))
            for (std::int64_t i = 0; i < dy.numel(); ++i) d[i] -= dy[i];
    });
}

Var mul(Graph &g, Var a, Var b) {
    require_same_shape(g, a, b, "mul");
    const Tensor &av = g.value(a);
    const Tensor &bv = g.value(b);
    Tensor y(av.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
    return g.record("mul", std::move(y), {a, b}, [a, b](Graph &gr, std::int32_t self) {
        const Tensor &dy = gr.grad(Var{self});
        const Tensor &av = gr.value(a);
        const Tensor &bv = gr.value(b);
        if (float *d = gr.grad_ptr(a))
            for (std::int64_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * bv[i];
        if (float *d = gr.grad_ptr(b))
            for (std::int64_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * av[i];
    });
}

Var affine(Graph &g, Var a, float scale, float shift) {
    return unary(
        g, a, "affine", [=](float v) { return v * scale + shift; }, [=](float, float) { return scale; });
}

Var relu(Graph &g, Var x) {
    return unary(
        g, x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Var leaky_relu(Graph &g, Var x, float slope) {
    return unary(
        g, x, "leaky_relu", [=](float v) { return v > 0.0f ? v : slope * v; },
        [=](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

Var tanh(Graph &g, Var x) {
    return unary(
        g, x, "tanh", [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Var sigmoid(Graph &g, Var x) {
    return unary(
        g, x, "sigmoid", [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
        [](float, float y) { return y * (1.0f - y); });
}

Var conv(Graph &g, Var x, Var w, std::optional<Var> bias, ConvOptions opt) {
    require_spatial(g, x, "conv");
    const Shape xs = g.value(x).shape();
    const Shape ws = g.value(w).shape();
    const int rank = static_cast<int>(xs.size());
    if (static_cast<int>(ws.size()) != rank || ws[1] != xs[1]) {
        throw DomainError("conv: weight '" + g.op_name(w) + "' " + shape_str(ws) + " incompatible with input '" +
                          g.op_name(x) + "' " + shape_str(xs));
    }
    if (bias && g.value(*bias).numel() != ws[0]) throw DomainError("conv: bias length does not match output channels");
    const auto geo = ConvGeometry::make(xs[0], xs[1], ws[0], spatial_extent(xs), kernel_extent(ws), iso(opt.stride, rank),
                                        iso_pad(opt.pad, rank));
    Tensor y(with_spatial(xs[0], ws[0], geo.out_size, rank));
    kernels::conv_forward(geo, g.value(x).data(), g.value(w).data(), bias ? g.value(*bias).data() : nullptr, y.data());

    std::vector<Var> parents{x, w};
    if (bias) parents.push_back(*bias);
    return g.record("conv", std::move(y), parents, [geo, x, w, bias](Graph &gr, std::int32_t self) {
        const Tensor &dy = gr.grad(Var{self});
        if (float *dx = gr.grad_ptr(x)) kernels::conv_backward_input(geo, dy.data(), gr.value(w).data(), dx);
        float *dw = gr.grad_ptr(w);
        float *db = bias ? gr.grad_ptr(*bias) : nullptr;
        if (dw) {
            kernels::conv_backward_params(geo, gr.value(x).data(), dy.data(), dw, db);
        } else if (db) {
            const std::int64_t P = geo.out_plane();
            for (std::int64_t co = 0; co < geo.out_channels; ++co) {
                double s = 0.0;
                for (std::int64_t n = 0; n < geo.batch; ++n)
                    for (std::int64_t p = 0; p < P; ++p) s += dy[(n * geo.out_channels + co) * P + p];
                db[co] += static_cast<float>(s);
            }
        }
    });
}

Var conv_transpose(Graph &g, Var x, Var w, std::optional<Var> bias, ConvTransposeOptions opt) {
    require_spatial(g, x, "conv_transpose");
    const Shape xs = g.value(x).shape();
    const Shape ws = g.value(w).shape();
    const int rank = static_cast<int>(xs.size());
    if (static_cast<int>(ws.size()) != rank || ws[0] != xs[1]) {
        throw DomainError("conv_transpose: weight '" + g.op_name(w) + "' " + shape_str(ws) +
                          " incompatible with input '" + g.op_name(x) + "' " + shape_str(xs));
    }
    if (opt.output_pad < 0 || opt.output_pad >= opt.stride) {
        throw DomainError("conv_transpose: output_pad must be in [0, stride)");
    }
    const std::int64_t cout = ws[1];
    if (bias && g.value(*bias).numel() != cout) {
        throw DomainError("conv_transpose: bias length does not match output channels");
    }
    const Extent3 in = spatial_extent(xs);
    const Extent3 k = kernel_extent(ws);
    const Extent3 s = iso(opt.stride, rank);
    const Extent3 p = iso_pad(opt.pad, rank);
    const Extent3 op = rank == 4 ? Extent3{0, opt.output_pad, opt.output_pad}
                                 : Extent3{opt.output_pad, opt.output_pad, opt.output_pad};
    Extent3 out{};
    for (int a = 0; a < 3; ++a) {
        out[a] = (in[a] - 1) * s[a] - 2 * p[a] + k[a] + op[a];
        if (out[a] < 1) throw DomainError("conv_transpose: output collapses on axis " + std::to_string(a));
    }
    // Equivalent forward convolution mapping the transposed output back to its input.
    const auto geo = ConvGeometry::make(xs[0], cout, xs[1], out, k, s, p);
    if (geo.out_size != in) throw DomainError("conv_transpose: inconsistent geometry");

    Tensor y(with_spatial(xs[0], cout, out, rank));
    kernels::conv_backward_input(geo, g.value(x).data(), g.value(w).data(), y.data());
    if (bias) {
        const Tensor &b = g.value(*bias);
        const std::int64_t P = geo.in_plane();
        for (std::int64_t n = 0; n < xs[0]; ++n)
            for (std::int64_t c = 0; c < cout; ++c)
                for (std::int64_t i = 0; i < P; ++i) y[(n * cout + c) * P + i] += b[c];
    }

    std::vector<Var> parents{x, w};
    if (bias) parents.push_back(*bias);
    return g.record("conv_transpose", std::move(y), parents, [geo, x, w, bias](Graph &gr, std::int32_t self) {
        const Tensor &dy = gr.grad(Var{self});
        if (float *dx = gr.grad_ptr(x)) {
            std::vector<float> tmp(static_cast<size_t>(gr.value(x).numel()));
            kernels::conv_forward(geo, dy.data(), gr.value(w).data(), nullptr, tmp.data());
            for (size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
        }
        if (float *dw = gr.grad_ptr(w)) kernels::conv_backward_params(geo, dy.data(), gr.value(x).data(), dw, nullptr);
        if (bias) {
            if (float *db = gr.grad_ptr(*bias)) {
                const std::int64_t P = geo.in_plane();
                for (std::int64_t c = 0; c < geo.in_channels; ++c) {
                    double s = 0.0;
                    for (std::int64_t n = 0; n < geo.batch; ++n)
                        for (std::int64_t i = 0; i < P; ++i) s += dy[(n * geo.in_channels + c) * P + i];
                    db[c] += static_cast<float>(s);
                }
            }
        }
    });
}

Var instance_norm(Graph &g, Var x, double eps) {
    require_spatial(g, x, "instance_norm");
    const Tensor &xv = g.value(x);
    const std::int64_t groups = xv.dim(0) * xv.dim(1);
    const std::int64_t P = xv.numel() / groups;
    Tensor y(xv.shape());
    std::vector<double> inv_std(static_cast<size_t>(groups));
    for (std::int64_t q = 0; q < groups; ++q) {
        const float *src = xv.data() + q * P;
        double m = 0.0;
        for (std::int64_t i = 0; i < P; ++i) m += src[i];
        m /= static_cast<double>(P);
        double v = 0.0;
        for (std::int64_t i = 0; i < P; ++i) v += (src[i] - m) * (src[i] - m);
        v /= static_cast<double>(P);
        const double is = 1.0 / std::sqrt(v + eps);
        inv_std[static_cast<size_t>(q)] = is;
        float *dst = y.data() + q * P;
        for (std::int64_t i = 0; i < P; ++i) dst[i] = static_cast<float>((src[i] - m) * is);
    }
    return g.record("instance_norm", std::move(y), {x},
                    [x, groups, P, inv_std = std::move(inv_std)](Graph &gr, std::int32_t self) {
                        float *dx = gr.grad_ptr(x);
                        if (!dx) return;
                        const Tensor &dy = gr.grad(Var{self});
                        const Tensor &yv = gr.value(Var{self});
                        for (std::int64_t q = 0; q < groups; ++q) {
                            const float *g_ = dy.data() + q * P;
                            const float *xh = yv.data() + q * P;
                            double mg = 0.0;
                            double mgx = 0.0;
                            for (std::int64_t i = 0; i < P; ++i) {
                                mg += g_[i];
                                mgx += static_cast<double>(g_[i]) * xh[i];
                            }
                            mg /= static_cast<double>(P);
                            mgx /= static_cast<double>(P);
                            const double is = inv_std[static_cast<size_t>(q)];
                            float *d = dx + q * P;
                            for (std::int64_t i = 0; i < P; ++i) d[i] += static_cast<float>(is * (g_[i] - mg - xh[i] * mgx));
                        }
                    });
}

Var reflection_pad(Graph &g, Var x, int pad) {
    require_spatial(g, x, "reflection_pad");
    const Shape xs = g.value(x).shape();
    const int rank = static_cast<int>(xs.size());
    const Extent3 in = spatial_extent(xs);
    const Extent3 p = iso_pad(pad, rank);
    Extent3 out{};
    for (int a = 0; a < 3; ++a) {
        if (p[a] >= in[a]) {
            throw DomainError("reflection_pad: pad " + std::to_string(pad) + " not smaller than extent of '" +
                              g.op_name(x) + "' " + shape_str(xs));
        }
        out[a] = in[a] + 2 * p[a];
    }
    auto reflect = [](std::int64_t i, std::int64_t n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * (n - 1) - i;
        return i;
    };
    // Source index of each output voxel within one channel plane.
    std::vector<std::int64_t> src_index(static_cast<size_t>(out[0] * out[1] * out[2]));
    std::int64_t o = 0;
    for (std::int64_t d = 0; d < out[0]; ++d)
        for (std::int64_t h = 0; h < out[1]; ++h)
            for (std::int64_t w = 0; w < out[2]; ++w, ++o) {
                const std::int64_t sd = reflect(d - p[0], in[0]);
                const std::int64_t sh = reflect(h - p[1], in[1]);
                const std::int64_t sw = reflect(w - p[2], in[2]);
                src_index[static_cast<size_t>(o)] = (sd * in[1] + sh) * in[2] + sw;
            }
    const std::int64_t groups = xs[0] * xs[1];
    const std::int64_t Pin = in[0] * in[1] * in[2];
    const std::int64_t Pout = out[0] * out[1] * out[2];
    const Tensor &xv = g.value(x);
    Tensor y(with_spatial(xs[0], xs[1], out, rank));
    for (std::int64_t q = 0; q < groups; ++q)
        for (std::int64_t i = 0; i < Pout; ++i) y[q * Pout + i] = xv[q * Pin + src_index[static_cast<size_t>(i)]];
    return g.record("reflection_pad", std::move(y), {x},
                    [x, groups, Pin, Pout, src_index = std::move(src_index)](Graph &gr, std::int32_t self) {
                        float *dx = gr.grad_ptr(x);
                        if (!dx) return;
                        const Tensor &dy = gr.grad(Var{self});
                        for (std::int64_t q = 0; q < groups; ++q)
                            for (std::int64_t i = 0; i < Pout; ++i)
                                dx[q * Pin + src_index[static_cast<size_t>(i)]] += dy[q * Pout + i];
                    });
}

Var reshape(Graph &g, Var x, Shape shape) {
    Tensor y = g.value(x).reshaped(std::move(shape));
    return g.record("reshape", std::move(y), {x}, [x](Graph &gr, std::int32_t self) {
        float *dx = gr.grad_ptr(x);
        if (!dx) return;
        const Tensor &dy = gr.grad(Var{self});
        for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
    });
}

Var mean(Graph &g, Var x) {
    const Tensor &xv = g.value(x);
    double s = 0.0;
    for (float v : xv.values()) s += v;
    const double n = static_cast<double>(xv.numel());
    return g.record("mean", Tensor({1}, {static_cast<float>(s / n)}), {x}, [x, n](Graph &gr, std::int32_t self) {
        float *dx = gr.grad_ptr(x);
        if (!dx) return;
        const float d = static_cast<float>(gr.grad(Var{self})[0] / n);
        for (std::int64_t i = 0; i < gr.value(x).numel(); ++i) dx[i] += d;
    });
}

Var mse(Graph &g, Var a, Var b) {
    require_same_shape(g, a, b, "mse");
    const Tensor &av = g.value(a);
    const Tensor &bv = g.value(b);
    double s = 0.0;
    for (std::int64_t i = 0; i < av.numel(); ++i) {
        const double d = static_cast<double>(av[i]) - bv[i];
        s += d * d;
    }
    const double n = static_cast<double>(av.numel());
    return g.record("mse", Tensor({1}, {static_cast<float>(s / n)}), {a, b}, [a, b, n](Graph &gr, std::int32_t self) {
        const double scale = 2.0 * gr.grad(Var{self})[0] / n;
        const Tensor &av = gr.value(a);
        const Tensor &bv = gr.value(b);
        float *da = gr.grad_ptr(a);
        float *db = gr.grad_ptr(b);
        for (std::int64_t i = 0; i < av.numel(); ++i) {
            const float d = static_cast<float>(scale * (static_cast<double>(av[i]) - bv[i]));
            if (da) da[i] += d;
            if (db) db[i] -= d;
        }
    });
}

Var l1(Graph &g, Var a, Var b) {
    require_same_shape(g, a, b, "l1");
    const Tensor &av = g.value(a);
    const Tensor &bv = g.value(b);
    double s = 0.0;
    for (std::int64_t i = 0; i < av.numel(); ++i) s += std::fabs(static_cast<double>(av[i]) - bv[i]);
    const double n = static_cast<double>(av.numel());
    return g.record("l1", Tensor({1}, {static_cast<float>(s / n)}), {a, b}, [a, b, n](Graph &gr, std::int32_t self) {
        const double scale = gr.grad(Var{self})[0] / n;
        const Tensor &av = gr.value(a);
        const Tensor &bv = gr.value(b);
        float *da = gr.grad_ptr(a);
        float *db = gr.grad_ptr(b);
        for (std::int64_t i = 0; i < av.numel(); ++i) {
            const float diff = av[i] - bv[i];
            const float sgn = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
            const float d = static_cast<float>(scale * sgn);
            if (da) da[i] += d;
            if (db) db[i] -= d;
        }
    });
}

Var mse_to(Graph &g, Var x, float target) {
    const Tensor &xv = g.value(x);
    double s = 0.0;
    for (float v : xv.values()) s += (static_cast<double>(v) - target) * (static_cast<double>(v) - target);
    const double n = static_cast<double>(xv.numel());
    return g.record("mse_to", Tensor({1}, {static_cast<float>(s / n)}), {x},
                    [x, n, target](Graph &gr, std::int32_t self) {
                        float *dx = gr.grad_ptr(x);
                        if (!dx) return;
                        const double scale = 2.0 * gr.grad(Var{self})[0] / n;
                        const Tensor &xv = gr.value(x);
                        for (std::int64_t i = 0; i < xv.numel(); ++i)
                            dx[i] += static_cast<float>(scale * (static_cast<double>(xv[i]) - target));
                    });
}

Var weighted_sum(Graph &g, Var x, const Tensor &weights) {
    const Tensor &xv = g.value(x);
    if (weights.shape() != xv.shape()) throw DomainError("weighted_sum: weight shape mismatch");
    double s = 0.0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) s += static_cast<double>(xv[i]) * weights[i];
    return g.record("weighted_sum", Tensor({1}, {static_cast<float>(s)}), {x}, [x, weights](Graph &gr, std::int32_t self) {
        float *dx = gr.grad_ptr(x);
        if (!dx) return;
        const float d = gr.grad(Var{self})[0];
        for (std::int64_t i = 0; i < weights.numel(); ++i) dx[i] += d * weights[i];
    });
}

Var cosine_similarity(Graph &g, Var a, Var b, double eps) {
    require_same_shape(g, a, b, "cosine_similarity");
    const Tensor &av = g.value(a);
    const Tensor &bv = g.value(b);
    const std::int64_t n = av.dim(0);
    const std::int64_t d = av.numel() / n;
    Tensor y({n});
    std::vector<double> dots(static_cast<size_t>(n)), na(static_cast<size_t>(n)), nb(static_cast<size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double x = av[r * d + i];
            const double z = bv[r * d + i];
            dot += x * z;
            sa += x * x;
            sb += z * z;
        }
        dots[static_cast<size_t>(r)] = dot;
        na[static_cast<size_t>(r)] = std::sqrt(sa);
        nb[static_cast<size_t>(r)] = std::sqrt(sb);
        y[r] = static_cast<float>(dot / std::max(na[static_cast<size_t>(r)] * nb[static_cast<size_t>(r)], eps));
    }
    return g.record("cosine_similarity", std::move(y), {a, b},
                    [a, b, n, d, eps, dots, na, nb](Graph &gr, std::int32_t self) {
                        const Tensor &dy = gr.grad(Var{self});
                        const Tensor &av = gr.value(a);
                        const Tensor &bv = gr.value(b);
                        float *da = gr.grad_ptr(a);
                        float *db = gr.grad_ptr(b);
                        for (std::int64_t r = 0; r < n; ++r) {
                            const size_t ri = static_cast<size_t>(r);
                            const double denom = na[ri] * nb[ri];
                            if (denom < eps) continue;
                            const double cos = dots[ri] / denom;
                            const double go = dy[r];
                            for (std::int64_t i = 0; i < d; ++i) {
                                const double x = av[r * d + i];
                                const double z = bv[r * d + i];
                                if (da) da[r * d + i] += static_cast<float>(go * (z / denom - cos * x / (na[ri] * na[ri])));
                                if (db) db[r * d + i] += static_cast<float>(go * (x / denom - cos * z / (nb[ri] * nb[ri])));
                            }
                        }
                    });
}

} // namespace petsynth::nd
