#include "petsynth/ndtensor/tensor.hpp"

#include <algorithm>

#include "petsynth/common/error.hpp"

namespace petsynth::nd {

std::int64_t shape_numel(const Shape &shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw DomainError("tensor dimension must be positive, got shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape &shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    values_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(values_.size())) {
        throw DomainError("tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                          shape_str(shape_));
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), values_);
}

void Tensor::fill(float v) { std::fill(values_.begin(), values_.end(), v); }

} // namespace petsynth::nd
