#include "petsynth/ndtensor/adam.hpp"

#include <cmath>

#include "petsynth/common/error.hpp"

namespace petsynth::nd {

Adam::Adam(std::vector<Parameter *> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (auto *p : params_) {
        m_.emplace_back(static_cast<size_t>(p->value.numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(p->value.numel()), 0.0f);
    }
}

void Adam::step() {
    ++step_count_;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    for (size_t k = 0; k < params_.size(); ++k) {
        auto &p = *params_[k];
        if (p.grad.shape() != p.value.shape()) throw DomainError("adam: gradient shape mismatch for '" + p.name + "'");
        auto &m = m_[k];
        auto &v = v_[k];
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad[i];
            const double mi = b1 * m[static_cast<size_t>(i)] + (1.0 - b1) * g;
            const double vi = b2 * v[static_cast<size_t>(i)] + (1.0 - b2) * g * g;
            m[static_cast<size_t>(i)] = static_cast<float>(mi);
            v[static_cast<size_t>(i)] = static_cast<float>(vi);
            const double update = config_.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + config_.epsilon);
            p.value[i] = static_cast<float>(p.value[i] - update);
        }
    }
}

} // namespace petsynth::nd
