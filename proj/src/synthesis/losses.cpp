#include "petsynth/synthesis/losses.hpp"

namespace petsynth::syn {

nd::Var lsgan_discriminator_loss(nd::Graph &g, nd::Var d_real, nd::Var d_fake) {
    return nd::add(g, nd::mse_to(g, d_fake, 0.0f), nd::mse_to(g, d_real, 1.0f));
}

nd::Var lsgan_generator_loss(nd::Graph &g, nd::Var d_fake) { return nd::mse_to(g, d_fake, 1.0f); }

nd::Var cycle_loss(nd::Graph &g, nd::Var y_a, nd::Var y_a_rec, nd::Var y_b, nd::Var y_b_rec) {
    return nd::add(g, nd::l1(g, y_a_rec, y_a), nd::l1(g, y_b_rec, y_b));
}

nd::Var paired_mse_loss(nd::Graph &g, nd::Var x_b, nd::Var y_b) { return nd::mse(g, x_b, y_b); }

LsganValues lsgan_losses(const nd::Tensor &d_fake, const nd::Tensor &d_real) {
    nd::Graph g;
    auto f = g.constant(d_fake, "d_fake");
    auto r = g.constant(d_real, "d_real");
    return {g.value(lsgan_discriminator_loss(g, r, f))[0], g.value(lsgan_generator_loss(g, f))[0]};
}

double cycle_loss(const nd::Tensor &y_a, const nd::Tensor &y_a_rec, const nd::Tensor &y_b, const nd::Tensor &y_b_rec) {
    nd::Graph g;
    return g.value(cycle_loss(g, g.constant(y_a), g.constant(y_a_rec), g.constant(y_b), g.constant(y_b_rec)))[0];
}

double paired_mse_loss(const nd::Tensor &x_b, const nd::Tensor &y_b) {
    nd::Graph g;
    return g.value(paired_mse_loss(g, g.constant(x_b), g.constant(y_b)))[0];
}

} // namespace petsynth::syn
