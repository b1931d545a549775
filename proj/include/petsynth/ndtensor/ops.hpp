#pragma once

// Differentiable layer set. Spatial ops accept NCHW (rank 4) or NCDHW (rank 5) tensors.

#include <array>
#include <optional>

#include "petsynth/ndtensor/graph.hpp"

namespace petsynth::nd {

struct ConvOptions {
    int stride = 1;
    int pad = 0;
};

struct ConvTransposeOptions {
    int stride = 1;
    int pad = 0;
    int output_pad = 0;
};

// Elementwise, identical shapes required.
Var add(Graph &g, Var a, Var b);
Var sub(Graph &g, Var a, Var b);
Var mul(Graph &g, Var a, Var b);
// a * scale + shift
Var affine(Graph &g, Var a, float scale, float shift = 0.0f);

Var relu(Graph &g, Var x);
Var leaky_relu(Graph &g, Var x, float slope = 0.2f);
Var tanh(Graph &g, Var x);
Var sigmoid(Graph &g, Var x);

// w: [Cout, Cin, k...]; bias: [Cout].
Var conv(Graph &g, Var x, Var w, std::optional<Var> bias, ConvOptions opt = {});
// w: [Cin, Cout, k...] (adjoint layout); bias: [Cout].
Var conv_transpose(Graph &g, Var x, Var w, std::optional<Var> bias, ConvTransposeOptions opt = {});

// Per (sample, channel) standardization over spatial axes, statistics in double.
Var instance_norm(Graph &g, Var x, double eps = 1e-5);
// Mirror padding by `pad` on every spatial axis (pad < extent).
Var reflection_pad(Graph &g, Var x, int pad);

Var reshape(Graph &g, Var x, Shape shape);

// Scalar reductions, accumulated in double. Results have shape [1].
Var mean(Graph &g, Var x);
Var mse(Graph &g, Var a, Var b);
Var l1(Graph &g, Var a, Var b);
// mean((x - target)^2) for a constant target value.
Var mse_to(Graph &g, Var x, float target);
// sum(x * weights) for a constant weight tensor.
Var weighted_sum(Graph &g, Var x, const Tensor &weights);

// Cosine similarity between matching samples of a and b, flattened per sample. Output: [N].
Var cosine_similarity(Graph &g, Var a, Var b, double eps = 1e-8);

} // namespace petsynth::nd
