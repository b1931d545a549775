#include "petsynth/synthesis/networks.hpp"

#include <algorithm>

#include "petsynth/common/error.hpp"

namespace petsynth::syn {

namespace {
constexpr float kInitStd = 0.02f;

nd::Shape spatial_kernel(int out, int in, int k, int dims) {
    if (dims == 2) return {out, in, k, k};
    return {out, in, k, k, k};
}
} // namespace

nd::Parameter &Module::conv_weight(const std::string &name, nd::Shape shape, std::mt19937_64 &rng) {
    nd::Tensor t(std::move(shape));
    std::normal_distribution<float> normal(0.0f, kInitStd);
    for (auto &v : t.values()) v = normal(rng);
    return store_.add(prefix_ + name, std::move(t));
}

nd::Parameter &Module::zeros(const std::string &name, nd::Shape shape) {
    return store_.add(prefix_ + name, nd::Tensor(std::move(shape), 0.0f));
}

nd::Var Module::use(nd::Graph &g, nd::Parameter &p, bool trainable) const {
    if (trainable) return g.parameter(p);
    return g.constant(p.value, p.name);
}

nd::Shape Generator::kernel_shape(int out, int in, int k) const { return spatial_kernel(out, in, k, spec_.spatial_dims); }

Generator::Generator(nd::ParameterStore &store, std::string prefix, GeneratorSpec spec, std::mt19937_64 &rng)
    : Module(store, std::move(prefix)), spec_(spec) {
    if (spec.spatial_dims != 2 && spec.spatial_dims != 3) throw DomainError("generator: spatial_dims must be 2 or 3");
    if (spec.ngf <= 0 || spec.channels <= 0 || spec.n_blocks < 0 || spec.n_down < 0)
        throw DomainError("generator: invalid spec");
    const int c = spec.channels;
    head_ = {&conv_weight("head.w", kernel_shape(spec.ngf, c, 7), rng), &zeros("head.b", {spec.ngf})};
    int ch = spec.ngf;
    for (int i = 0; i < spec.n_down; ++i) {
        const auto n = "down" + std::to_string(i);
        down_.push_back({&conv_weight(n + ".w", kernel_shape(ch * 2, ch, 3), rng), &zeros(n + ".b", {ch * 2})});
        ch *= 2;
    }
    for (int i = 0; i < spec.n_blocks; ++i) {
        const auto n = "res" + std::to_string(i);
        Conv a{&conv_weight(n + ".a.w", kernel_shape(ch, ch, 3), rng), &zeros(n + ".a.b", {ch})};
        Conv b{&conv_weight(n + ".b.w", kernel_shape(ch, ch, 3), rng), &zeros(n + ".b.b", {ch})};
        blocks_.emplace_back(a, b);
    }
    for (int i = 0; i < spec.n_down; ++i) {
        const auto n = "up" + std::to_string(i);
        // Transposed weights are (in, out, k...).
        up_.push_back({&conv_weight(n + ".w", kernel_shape(ch, ch / 2, 3), rng), &zeros(n + ".b", {ch / 2})});
        ch /= 2;
    }
    tail_ = {&conv_weight("tail.w", kernel_shape(c, ch, 7), rng), &zeros("tail.b", {c})};
}

nd::Var Generator::forward(nd::Graph &g, nd::Var x, bool trainable) const {
    auto conv = [&](nd::Var h, const Conv &c, nd::ConvOptions opt) {
        return nd::conv(g, h, use(g, *c.w, trainable), use(g, *c.b, trainable), opt);
    };
    nd::Var h = nd::reflection_pad(g, x, 3);
    h = nd::relu(g, nd::instance_norm(g, conv(h, head_, {1, 0})));
    for (const auto &d : down_) h = nd::relu(g, nd::instance_norm(g, conv(h, d, {2, 1})));
    for (const auto &[a, b] : blocks_) {
        nd::Var r = nd::relu(g, nd::instance_norm(g, conv(nd::reflection_pad(g, h, 1), a, {1, 0})));
        r = nd::instance_norm(g, conv(nd::reflection_pad(g, r, 1), b, {1, 0}));
        h = nd::add(g, h, r);
    }
    for (const auto &u : up_) {
        h = nd::conv_transpose(g, h, use(g, *u.w, trainable), use(g, *u.b, trainable), {2, 1, 1});
        h = nd::relu(g, nd::instance_norm(g, h));
    }
    h = conv(nd::reflection_pad(g, h, 3), tail_, {1, 0});
    return nd::tanh(g, h);
}

std::vector<nd::Parameter *> Generator::parameters() const {
    std::vector<nd::Parameter *> out{head_.w, head_.b};
    for (const auto &d : down_) out.insert(out.end(), {d.w, d.b});
    for (const auto &[a, b] : blocks_) out.insert(out.end(), {a.w, a.b, b.w, b.b});
    for (const auto &u : up_) out.insert(out.end(), {u.w, u.b});
    out.insert(out.end(), {tail_.w, tail_.b});
    return out;
}

Discriminator::Discriminator(nd::ParameterStore &store, std::string prefix, DiscriminatorSpec spec,
                             std::mt19937_64 &rng)
    : Module(store, std::move(prefix)), spec_(spec) {
    if (spec.spatial_dims != 2 && spec.spatial_dims != 3) throw DomainError("discriminator: spatial_dims must be 2 or 3");
    if (spec.ndf <= 0 || spec.n_layers < 1) throw DomainError("discriminator: invalid spec");
    auto add = [&](int out, int in, int stride, bool norm, bool act) {
        const auto n = "l" + std::to_string(layers_.size());
        layers_.push_back({&conv_weight(n + ".w", spatial_kernel(out, in, 4, spec.spatial_dims), rng),
                           &zeros(n + ".b", {out}), stride, norm, act});
    };
    add(spec.ndf, spec.channels, 2, false, true);
    int mult = 1;
    for (int n = 1; n < spec.n_layers; ++n) {
        const int prev = mult;
        mult = std::min(1 << n, 8);
        add(spec.ndf * mult, spec.ndf * prev, 2, true, true);
    }
    const int prev = mult;
    mult = std::min(1 << spec.n_layers, 8);
    add(spec.ndf * mult, spec.ndf * prev, 1, true, true);
    add(1, spec.ndf * mult, 1, false, false);
}

nd::Var Discriminator::forward(nd::Graph &g, nd::Var x, bool trainable) const {
    nd::Var h = x;
    for (const auto &L : layers_) {
        h = nd::conv(g, h, use(g, *L.w, trainable), use(g, *L.b, trainable), {L.stride, 1});
        if (L.norm) h = nd::instance_norm(g, h);
        if (L.act) h = nd::leaky_relu(g, h, 0.2f);
    }
    return h;
}

std::vector<nd::Parameter *> Discriminator::parameters() const {
    std::vector<nd::Parameter *> out;
    for (const auto &L : layers_) out.insert(out.end(), {L.w, L.b});
    return out;
}

} // namespace petsynth::syn
