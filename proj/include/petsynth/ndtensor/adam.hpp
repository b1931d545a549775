#pragma once

#include <cstdint>
#include <vector>

#include "petsynth/ndtensor/graph.hpp"

namespace petsynth::nd {

struct AdamConfig {
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction. Moments are zero at step 0 and sized to each parameter.
class Adam {
public:
    Adam(std::vector<Parameter *> params, AdamConfig config);

    // Applies one update from Parameter::grad; the gradients are left untouched.
    void step();

    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    const AdamConfig &config() const { return config_; }
    std::int64_t step_count() const { return step_count_; }
    const std::vector<float> &first_moment(size_t i) const { return m_.at(i); }
    const std::vector<float> &second_moment(size_t i) const { return v_.at(i); }

private:
    std::vector<Parameter *> params_;
    AdamConfig config_;
    std::int64_t step_count_ = 0;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

} // namespace petsynth::nd
