#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace petsynth::nd {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

// Dense row-major float array. Gradients live on graph nodes and parameters, not here.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    const Shape &shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(values_.size()); }
    bool empty() const noexcept { return values_.empty(); }

    std::span<float> values() noexcept { return values_; }
    std::span<const float> values() const noexcept { return values_; }
    float *data() noexcept { return values_.data(); }
    const float *data() const noexcept { return values_.data(); }
    std::vector<float> &storage() noexcept { return values_; }

    float &operator[](std::int64_t i) { return values_[static_cast<size_t>(i)]; }
    float operator[](std::int64_t i) const { return values_[static_cast<size_t>(i)]; }

    // Same buffer, new shape. Throws when the element counts differ.
    Tensor reshaped(Shape shape) const;
    void fill(float v);

    friend bool operator==(const Tensor &, const Tensor &) = default;

private:
    Shape shape_;
    std::vector<float> values_;
};

} // namespace petsynth::nd
