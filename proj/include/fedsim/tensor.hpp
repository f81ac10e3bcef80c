#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedsim {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major float tensor. The leading dimension is the batch.
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(Shape s, float fill = 0.0f) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
        if (shape_size(shape) != data.size())
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_to_string(shape));
    }

    std::size_t rank() const { return shape.size(); }
    std::size_t size() const { return data.size(); }
    std::size_t batch() const { return shape.empty() ? 0 : shape[0]; }
    /// Scalars per batch row.
    std::size_t row_size() const { return batch() == 0 ? 0 : data.size() / batch(); }

    std::span<float> row(std::size_t i) { return {data.data() + i * row_size(), row_size()}; }
    std::span<const float> row(std::size_t i) const { return {data.data() + i * row_size(), row_size()}; }

    float& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    float at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
};

}  // namespace fedsim
