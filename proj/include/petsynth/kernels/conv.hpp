#pragma once

// Convolution kernels over NC[D]HW float buffers. Two-dimensional convolutions are expressed as
// three-dimensional ones with a unit depth axis.
//
// The default implementations lower to im2col + GEMM and split the batch into fixed-size chunks
// that run under OpenMP. Chunking depends only on the geometry, never on the thread count, and
// per-chunk weight gradients are reduced in chunk order, so results are bit-identical for any
// number of threads. The `reference` namespace keeps direct-loop versions for testing.

#include <array>
#include <cstdint>

namespace petsynth::kernels {

using Extent3 = std::array<std::int64_t, 3>;

struct ConvGeometry {
    std::int64_t batch = 1;
    std::int64_t in_channels = 1;
    std::int64_t out_channels = 1;
    Extent3 in_size{1, 1, 1};
    Extent3 kernel{1, 1, 1};
    Extent3 stride{1, 1, 1};
    Extent3 pad{0, 0, 0};
    Extent3 out_size{1, 1, 1};

    // Fills out_size from the other fields; throws DomainError when an axis collapses.
    static ConvGeometry make(std::int64_t batch, std::int64_t in_channels, std::int64_t out_channels, Extent3 in_size,
                             Extent3 kernel, Extent3 stride, Extent3 pad);

    std::int64_t in_plane() const { return in_size[0] * in_size[1] * in_size[2]; }
    std::int64_t out_plane() const { return out_size[0] * out_size[1] * out_size[2]; }
    std::int64_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
    std::int64_t weight_count() const { return out_channels * in_channels * kernel_volume(); }
};

// y[n,co,o] = bias[co] + sum_{ci,k} w[co,ci,k] * x[n,ci,o*stride - pad + k]. Overwrites y.
void conv_forward(const ConvGeometry &g, const float *x, const float *w, const float *bias, float *y);
// dx += adjoint of conv_forward applied to dy.
void conv_backward_input(const ConvGeometry &g, const float *dy, const float *w, float *dx);
// dw += d<y,dy>/dw, db += per-channel sums of dy (db may be null).
void conv_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw, float *db);

namespace reference {
void conv_forward(const ConvGeometry &g, const float *x, const float *w, const float *bias, float *y);
void conv_backward_input(const ConvGeometry &g, const float *dy, const float *w, float *dx);
void conv_backward_params(const ConvGeometry &g, const float *x, const float *dy, float *dw, float *db);
} // namespace reference

} // namespace petsynth::kernels
