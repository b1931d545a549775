#include "petsynth/kernels/conv.hpp"

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <string>
#include <vector>

#include "petsynth/common/error.hpp"

namespace petsynth::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

constexpr std::int64_t kColumnBudget = std::int64_t{1} << 22; // floats per im2col chunk

std::int64_t samples_per_chunk(const ConvGeometry &g) {
    const std::int64_t per_sample = g.in_channels * g.kernel_volume() * g.out_plane();
    return std::clamp<std::int64_t>(kColumnBudget / std::max<std::int64_t>(per_sample, 1), 1, g.batch);
}

// cols has K = in_channels * kernel_volume rows and `stride_cols` columns; sample occupies
// columns [col0, col0 + out_plane).
void im2col(const ConvGeometry &g, const float *x, float *cols, std::int64_t stride_cols, std::int64_t col0) {
    const auto [D, H, W] = g.in_size;
    const auto [OD, OH, OW] = g.out_size;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
        const float *xc = x + ci * D * H * W;
        for (std::int64_t kd = 0; kd < g.kernel[0]; ++kd) {
            for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh) {
                for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
                    float *dst = cols + row * stride_cols + col0;
                    for (std::int64_t od = 0; od < OD; ++od) {
                        const std::int64_t id = od * g.stride[0] - g.pad[0] + kd;
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
                            float *d = dst + (od * OH + oh) * OW;
                            if (id < 0 || id >= D || ih < 0 || ih >= H) {
                                std::fill(d, d + OW, 0.0f);
                                continue;
                            }
                            const float *src = xc + (id * H + ih) * W;
                            if (g.stride[2] == 1) {
                                const std::int64_t off = kw - g.pad[2];
                                const std::int64_t lo = std::clamp<std::int64_t>(-off, 0, OW);
                                const std::int64_t hi = std::clamp<std::int64_t>(W - off, lo, OW);
                                std::fill(d, d + lo, 0.0f);
                                std::copy(src + lo + off, src + hi + off, d + lo);
                                std::fill(d + hi, d + OW, 0.0f);
                                continue;
                            }
                            for (std::int64_t ow = 0; ow < OW; ++ow) {
                                const std::int64_t iw = ow * g.stride[2] - g.pad[2] + kw;
                                d[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0f;
                            }
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry &g, const float *cols, std::int64_t stride_cols, std::int64_t col0, float *dx) {
    const auto [D, H, W] = g.in_size;
    const auto [OD, OH, OW] = g.out_size;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
        float *xc = dx + ci * D * H * W;
        for (std::int64_t kd = 0; kd < g.kernel[0]; ++kd) {
            for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh) {
                for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
                    const float *src = cols + row * stride_cols + col0;
                    for (std::int64_t od = 0; od < OD; ++od) {
                        const std::int64_t id = od * g.stride[0] - g.pad[0] + kd;
                        if (id < 0 || id >= D) continue;
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
                            if (ih < 0 || ih >= H) continue;
                            const float *s = src + (od * OH + oh) * OW;
                            float *d = xc + (id * H + ih) * W;
                            for (std::int64_t ow = 0; ow < OW; ++ow) {
                                const std::int64_t iw = ow * g.stride[2] - g.pad[2] + kw;
                                if (iw >= 0 && iw < W) d[iw] += s[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Stride-1 convolutions with few output channels run as direct row loops: the im2col buffer would
// be in_channels * kernel_volume times larger than the output and dominate the cost.
bool use_direct(const ConvGeometry &g) {
    return g.stride[0] == 1 && g.stride[1] == 1 && g.stride[2] == 1 && g.out_channels <= 4;
}

// Calls fn(od, oh, id, ih, ow_lo, ow_hi, iw_off) for every valid output row of one kernel tap.
template <class Fn>
void for_each_row(const ConvGeometry &g, std::int64_t kd, std::int64_t kh, std::int64_t kw, Fn &&fn) {
    const auto [D, H, W] = g.in_size;
    const auto [OD, OH, OW] = g.out_size;
    const std::int64_t off = kw - g.pad[2];
    const std::int64_t lo = std::clamp<std::int64_t>(-off, 0, OW);
    const std::int64_t hi = std::clamp<std::int64_t>(W - off, lo, OW);
    if (lo >= hi) return;
    for (std::int64_t od = 0; od < OD; ++od) {
        const std::int64_t id = od - g.pad[0] + kd;
        if (id < 0 || id >= D) continue;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
            const std::int64_t ih = oh - g.pad[1] + kh;
            if (ih < 0 || ih >= H) continue;
            fn((od * OH + oh) * OW, (id * H + ih) * W + off, lo, hi);
        }
    }
}

void direct_forward(const ConvGeometry &g, const float *x, const float *w, const float *bias, float *y) {
    const std::int64_t P = g.out_plane(), IP = g.in_plane(), KV = g.kernel_volume();
#pragma omp parallel for schedule(static)
    for (std::int64_t q = 0; q < g.batch * g.out_channels; ++q) {
        const std::int64_t n = q / g.out_channels, co = q % g.out_channels;
        float *yp = y + q * P;
        std::fill(yp, yp + P, bias ? bias[co] : 0.0f);
        for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
            const float *xp = x + (n * g.in_channels + ci) * IP;
            const float *wp = w + (co * g.in_channels + ci) * KV;
            for (std::int64_t kd = 0, t = 0; kd < g.kernel[0]; ++kd)
                for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh)
                    for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++t) {
                        const float wv = wp[t];
                        for_each_row(g, kd, kh, kw, [&](std::int64_t yo, std::int64_t xo, std::int64_t lo, std::int64_t hi) {
                            float *yr = yp + yo;
                            const float *xr = xp + xo;
                            for (std::int64_t i = lo; i < hi; ++i) yr[i] += wv * xr[i];
                        });
                    }
        }
    }
}

void direct_backward_input(const ConvGeometry &g, const float *dy, const float *w, float *dx) {
    const std::int64_t P = g.out_plane(), IP = g.in_plane(), KV = g.kernel_volume();
#pragma omp parallel for schedule(static)
    for (std::int64_t q = 0; q < g.batch * g.in_channels; ++q) {
        const std::int64_t n = q / g.in_channels, ci = q % g.in_channels;
        float *xp = dx + q * IP;
        for (std::int64_t co = 0; co < g.out_channels; ++co) {
            const float *yp = dy + (n * g.out_channels + co) * P;
            const float *wp = w + (co * g.in_channels + ci) * KV;
            for (std::int64_t kd = 0, t = 0; kd < g.kernel[0]; ++kd)
                for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh)
                    for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++t) {
                        const float wv = wp[t];
                        for_each_row(g, kd, kh, kw, [&](std::int64_t yo, std::int64_t xo, std::int64_t lo, std::int64_t hi) {
                            const float *yr = yp + yo;
                            float *xr = xp + xo;
                            for (std::int64_t i = lo; i < hi; ++i) xr[i] += wv * yr[i];
                        });
                    }
        }
    }
}

void direct_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw) {
    const std::int64_t P = g.out_plane(), IP = g.in_plane(), KV = g.kernel_volume();
#pragma omp parallel for schedule(static)
    for (std::int64_t q = 0; q < g.out_channels * g.in_channels; ++q) {
        const std::int64_t co = q / g.in_channels, ci = q % g.in_channels;
        float *wp = dw + q * KV;
        for (std::int64_t kd = 0, t = 0; kd < g.kernel[0]; ++kd)
            for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh)
                for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++t) {
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < g.batch; ++n) {
                        const float *xp = x + (n * g.in_channels + ci) * IP;
                        const float *yp = dy + (n * g.out_channels + co) * P;
                        for_each_row(g, kd, kh, kw, [&](std::int64_t yo, std::int64_t xo, std::int64_t lo, std::int64_t hi) {
                            float row = 0.0f;
                            for (std::int64_t i = lo; i < hi; ++i) row += yp[yo + i] * xp[xo + i];
                            acc += row;
                        });
                    }
                    wp[t] += static_cast<float>(acc);
                }
    }
}

} // namespace

ConvGeometry ConvGeometry::make(std::int64_t batch, std::int64_t in_channels, std::int64_t out_channels,
                                Extent3 in_size, Extent3 kernel, Extent3 stride, Extent3 pad) {
    ConvGeometry g;
    g.batch = batch;
    g.in_channels = in_channels;
    g.out_channels = out_channels;
    g.in_size = in_size;
    g.kernel = kernel;
    g.stride = stride;
    g.pad = pad;
    for (int a = 0; a < 3; ++a) {
        if (stride[a] < 1 || kernel[a] < 1 || pad[a] < 0) throw DomainError("invalid convolution parameters");
        const std::int64_t span = in_size[a] + 2 * pad[a] - kernel[a];
        if (span < 0) {
            throw DomainError("convolution kernel " + std::to_string(kernel[a]) + " larger than padded input " +
                              std::to_string(in_size[a] + 2 * pad[a]) + " on axis " + std::to_string(a));
        }
        g.out_size[a] = span / stride[a] + 1;
    }
    return g;
}

void conv_forward(const ConvGeometry &g, const float *x, const float *w, const float *bias, float *y) {
    if (use_direct(g)) return direct_forward(g, x, w, bias, y);
    const std::int64_t K = g.in_channels * g.kernel_volume();
    const std::int64_t P = g.out_plane();
    const std::int64_t chunk = samples_per_chunk(g);
    const std::int64_t nchunks = (g.batch + chunk - 1) / chunk;
    const ConstRowMap Wm(w, g.out_channels, K);

#pragma omp parallel
    {
        std::vector<float> cols;
        RowMat out;
#pragma omp for schedule(static)
        for (std::int64_t c = 0; c < nchunks; ++c) {
            const std::int64_t n0 = c * chunk;
            const std::int64_t nn = std::min(chunk, g.batch - n0);
            cols.resize(static_cast<size_t>(K * nn * P));
            for (std::int64_t s = 0; s < nn; ++s) {
                im2col(g, x + (n0 + s) * g.in_channels * g.in_plane(), cols.data(), nn * P, s * P);
            }
            out.noalias() = Wm * ConstRowMap(cols.data(), K, nn * P);
            for (std::int64_t s = 0; s < nn; ++s) {
                float *ys = y + (n0 + s) * g.out_channels * P;
                for (std::int64_t co = 0; co < g.out_channels; ++co) {
                    const float b = bias ? bias[co] : 0.0f;
                    const float *src = out.data() + co * nn * P + s * P;
                    float *dst = ys + co * P;
                    for (std::int64_t p = 0; p < P; ++p) dst[p] = src[p] + b;
                }
            }
        }
    }
}

void conv_backward_input(const ConvGeometry &g, const float *dy, const float *w, float *dx) {
    if (use_direct(g)) return direct_backward_input(g, dy, w, dx);
    const std::int64_t K = g.in_channels * g.kernel_volume();
    const std::int64_t P = g.out_plane();
    const std::int64_t chunk = samples_per_chunk(g);
    const std::int64_t nchunks = (g.batch + chunk - 1) / chunk;
    const ConstRowMap Wm(w, g.out_channels, K);

#pragma omp parallel
    {
        std::vector<float> gathered;
        RowMat dcols;
#pragma omp for schedule(static)
        for (std::int64_t c = 0; c < nchunks; ++c) {
            const std::int64_t n0 = c * chunk;
            const std::int64_t nn = std::min(chunk, g.batch - n0);
            gathered.resize(static_cast<size_t>(g.out_channels * nn * P));
            for (std::int64_t s = 0; s < nn; ++s) {
                for (std::int64_t co = 0; co < g.out_channels; ++co) {
                    const float *src = dy + ((n0 + s) * g.out_channels + co) * P;
                    std::copy(src, src + P, gathered.data() + co * nn * P + s * P);
                }
            }
            dcols.noalias() = Wm.transpose() * ConstRowMap(gathered.data(), g.out_channels, nn * P);
            for (std::int64_t s = 0; s < nn; ++s) {
                col2im_add(g, dcols.data(), nn * P, s * P, dx + (n0 + s) * g.in_channels * g.in_plane());
            }
        }
    }
}

namespace {
void gemm_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw);
}

void conv_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw, float *db) {
    if (use_direct(g)) {
        direct_backward_params(g, x, dy, dw);
    } else {
        gemm_backward_params(g, x, dy, dw);
    }
    if (db) {
        const std::int64_t P = g.out_plane();
        for (std::int64_t co = 0; co < g.out_channels; ++co) {
            double acc = 0.0;
            for (std::int64_t n = 0; n < g.batch; ++n) {
                const float *src = dy + (n * g.out_channels + co) * P;
                for (std::int64_t p = 0; p < P; ++p) acc += src[p];
            }
            db[co] += static_cast<float>(acc);
        }
    }
}

namespace {
void gemm_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw) {
    const std::int64_t K = g.in_channels * g.kernel_volume();
    const std::int64_t P = g.out_plane();
    const std::int64_t chunk = samples_per_chunk(g);
    const std::int64_t nchunks = (g.batch + chunk - 1) / chunk;
    std::vector<RowMat> partial(static_cast<size_t>(nchunks));

#pragma omp parallel
    {
        std::vector<float> cols;
        std::vector<float> gathered;
#pragma omp for schedule(static)
        for (std::int64_t c = 0; c < nchunks; ++c) {
            const std::int64_t n0 = c * chunk;
            const std::int64_t nn = std::min(chunk, g.batch - n0);
            cols.resize(static_cast<size_t>(K * nn * P));
            gathered.resize(static_cast<size_t>(g.out_channels * nn * P));
            for (std::int64_t s = 0; s < nn; ++s) {
                im2col(g, x + (n0 + s) * g.in_channels * g.in_plane(), cols.data(), nn * P, s * P);
                for (std::int64_t co = 0; co < g.out_channels; ++co) {
                    const float *src = dy + ((n0 + s) * g.out_channels + co) * P;
                    std::copy(src, src + P, gathered.data() + co * nn * P + s * P);
                }
            }
            partial[static_cast<size_t>(c)].noalias() =
                ConstRowMap(gathered.data(), g.out_channels, nn * P) * ConstRowMap(cols.data(), K, nn * P).transpose();
        }
    }

    RowMap dW(dw, g.out_channels, K);
    for (const auto &p : partial) dW += p;
}
} // namespace

namespace reference {

namespace {

template <class Fn>
void for_each_tap(const ConvGeometry &g, Fn &&fn) {
    const auto [D, H, W] = g.in_size;
    const auto [OD, OH, OW] = g.out_size;
    for (std::int64_t n = 0; n < g.batch; ++n)
        for (std::int64_t co = 0; co < g.out_channels; ++co)
            for (std::int64_t od = 0; od < OD; ++od)
                for (std::int64_t oh = 0; oh < OH; ++oh)
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t yi = (((n * g.out_channels + co) * OD + od) * OH + oh) * OW + ow;
                        for (std::int64_t ci = 0; ci < g.in_channels; ++ci)
                            for (std::int64_t kd = 0; kd < g.kernel[0]; ++kd) {
                                const std::int64_t id = od * g.stride[0] - g.pad[0] + kd;
                                if (id < 0 || id >= D) continue;
                                for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh) {
                                    const std::int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw) {
                                        const std::int64_t iw = ow * g.stride[2] - g.pad[2] + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        const std::int64_t xi = (((n * g.in_channels + ci) * D + id) * H + ih) * W + iw;
                                        const std::int64_t wi =
                                            (((co * g.in_channels + ci) * g.kernel[0] + kd) * g.kernel[1] + kh) *
                                                g.kernel[2] +
                                            kw;
                                        fn(yi, xi, wi, co);
                                    }
                                }
                            }
                    }
}

} // namespace

void conv_forward(const ConvGeometry &g, const float *x, const float *w, const float *bias, float *y) {
    if (use_direct(g)) return direct_forward(g, x, w, bias, y);
    const std::int64_t ny = g.batch * g.out_channels * g.out_plane();
    std::vector<double> acc(static_cast<size_t>(ny), 0.0);
    for_each_tap(g, [&](std::int64_t yi, std::int64_t xi, std::int64_t wi, std::int64_t) {
        acc[static_cast<size_t>(yi)] += static_cast<double>(x[xi]) * w[wi];
    });
    const std::int64_t P = g.out_plane();
    for (std::int64_t i = 0; i < ny; ++i) {
        const std::int64_t co = (i / P) % g.out_channels;
        y[i] = static_cast<float>(acc[static_cast<size_t>(i)] + (bias ? bias[co] : 0.0f));
    }
}

void conv_backward_input(const ConvGeometry &g, const float *dy, const float *w, float *dx) {
    if (use_direct(g)) return direct_backward_input(g, dy, w, dx);
    const std::int64_t nx = g.batch * g.in_channels * g.in_plane();
    std::vector<double> acc(static_cast<size_t>(nx), 0.0);
    for_each_tap(g, [&](std::int64_t yi, std::int64_t xi, std::int64_t wi, std::int64_t) {
        acc[static_cast<size_t>(xi)] += static_cast<double>(dy[yi]) * w[wi];
    });
    for (std::int64_t i = 0; i < nx; ++i) dx[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
}

void conv_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw, float *db) {
    std::vector<double> acc(static_cast<size_t>(g.weight_count()), 0.0);
    for_each_tap(g, [&](std::int64_t yi, std::int64_t xi, std::int64_t wi, std::int64_t) {
        acc[static_cast<size_t>(wi)] += static_cast<double>(dy[yi]) * x[xi];
    });
    for (std::int64_t i = 0; i < g.weight_count(); ++i) dw[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
    if (db) {
        const std::int64_t P = g.out_plane();
        for (std::int64_t co = 0; co < g.out_channels; ++co) {
            double s = 0.0;
            for (std::int64_t n = 0; n < g.batch; ++n)
                for (std::int64_t p = 0; p < P; ++p) s += dy[(n * g.out_channels + co) * P + p];
            db[co] += static_cast<float>(s);
        }
    }
}

} // namespace reference

} // namespace petsynth::kernels
