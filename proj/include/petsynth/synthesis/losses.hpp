#pragma once

#include "petsynth/ndtensor/graph.hpp"
#include "petsynth/ndtensor/ops.hpp"

namespace petsynth::syn {

// Least-squares adversarial terms over realism maps (means over map and batch).
// Discriminator: mean(D(fake)^2) + mean((D(real) - 1)^2). Generator: mean((D(fake) - 1)^2).
nd::Var lsgan_discriminator_loss(nd::Graph &g, nd::Var d_real, nd::Var d_fake);
nd::Var lsgan_generator_loss(nd::Graph &g, nd::Var d_fake);

// mean|a' - a| + mean|b' - b|
nd::Var cycle_loss(nd::Graph &g, nd::Var y_a, nd::Var y_a_rec, nd::Var y_b, nd::Var y_b_rec);
nd::Var paired_mse_loss(nd::Graph &g, nd::Var x_b, nd::Var y_b);

struct LsganValues {
    double discriminator = 0.0;
    double generator = 0.0;
};
// Value-only helpers used by tests and reports.
LsganValues lsgan_losses(const nd::Tensor &d_fake, const nd::Tensor &d_real);
double cycle_loss(const nd::Tensor &y_a, const nd::Tensor &y_a_rec, const nd::Tensor &y_b, const nd::Tensor &y_b_rec);
double paired_mse_loss(const nd::Tensor &x_b, const nd::Tensor &y_b);

} // namespace petsynth::syn
