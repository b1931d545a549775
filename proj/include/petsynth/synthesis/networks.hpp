#pragma once

#include <random>
#include <string>
#include <vector>

#include "petsynth/ndtensor/graph.hpp"
#include "petsynth/ndtensor/ops.hpp"

namespace petsynth::syn {

struct GeneratorSpec {
    int spatial_dims = 3; // 2 for slice triplets, 3 for patches
    int channels = 1;     // input and output channels
    int ngf = 16;
    int n_blocks = 2;
    int n_down = 2;
};

struct DiscriminatorSpec {
    int spatial_dims = 3;
    int channels = 1;
    int ndf = 16;
    int n_layers = 2;
};

// Parameters referenced by a network; frozen use reads them as constants so no gradient is formed.
class Module {
protected:
    Module(nd::ParameterStore &store, std::string prefix) : store_(store), prefix_(std::move(prefix)) {}

    nd::Parameter &conv_weight(const std::string &name, nd::Shape shape, std::mt19937_64 &rng);
    nd::Parameter &zeros(const std::string &name, nd::Shape shape);
    nd::Var use(nd::Graph &g, nd::Parameter &p, bool trainable) const;

    nd::ParameterStore &store_;
    std::string prefix_;
};

// ResNet generator: reflect-pad c7, two stride-2 downsamplings, residual blocks, two transposed
// upsamplings, reflect-pad c7, tanh. Instance norm without affine; spatial size preserved when
// divisible by 2^n_down.
class Generator : public Module {
public:
    Generator(nd::ParameterStore &store, std::string prefix, GeneratorSpec spec, std::mt19937_64 &rng);
    nd::Var forward(nd::Graph &g, nd::Var x, bool trainable = true) const;
    const GeneratorSpec &spec() const { return spec_; }
    std::vector<nd::Parameter *> parameters() const;

private:
    struct Conv {
        nd::Parameter *w = nullptr, *b = nullptr;
    };
    nd::Shape kernel_shape(int out, int in, int k) const;

    GeneratorSpec spec_;
    Conv head_, tail_;
    std::vector<Conv> down_, up_;
    std::vector<std::pair<Conv, Conv>> blocks_;
};

// PatchGAN: k4 s2 convs with LeakyReLU(0.2), instance norm from the second layer on, a k4 s1 layer,
// and a final k4 s1 projection to a one-channel realism map.
class Discriminator : public Module {
public:
    Discriminator(nd::ParameterStore &store, std::string prefix, DiscriminatorSpec spec, std::mt19937_64 &rng);
    nd::Var forward(nd::Graph &g, nd::Var x, bool trainable = true) const;
    const DiscriminatorSpec &spec() const { return spec_; }
    std::vector<nd::Parameter *> parameters() const;

private:
    struct Layer {
        nd::Parameter *w = nullptr, *b = nullptr;
        int stride = 1;
        bool norm = false, act = true;
    };
    DiscriminatorSpec spec_;
    std::vector<Layer> layers_;
};

} // namespace petsynth::syn
