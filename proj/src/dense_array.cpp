#include "bags/dense_array.hpp"

#include "bags/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace bags {

namespace {
std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
} // namespace

DenseArray::DenseArray(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(element_count(shape_), fill) {}

DenseArray DenseArray::from_values(std::vector<std::size_t> shape, std::vector<double> values) {
    if (element_count(shape) != values.size()) {
        throw DimensionError("DenseArray: " + std::to_string(values.size()) +
                             " values do not fill the requested shape");
    }
    DenseArray out;
    out.shape_ = std::move(shape);
    out.values_ = std::move(values);
    return out;
}

std::size_t DenseArray::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("DenseArray: axis out of range");
    }
    return shape_[axis];
}

std::size_t DenseArray::rows() const noexcept { return shape_.size() <= 1 ? 1 : shape_[0]; }

std::size_t DenseArray::row_width() const noexcept {
    if (shape_.empty()) {
        return 1;
    }
    if (shape_.size() == 1) {
        return shape_[0];
    }
    return std::accumulate(shape_.begin() + 1, shape_.end(), std::size_t{1}, std::multiplies<>());
}

std::span<double> DenseArray::grad() {
    if (grad_.size() != values_.size()) {
        grad_.assign(values_.size(), 0.0);
    }
    return grad_;
}

std::span<const double> DenseArray::grad() const {
    if (grad_.size() != values_.size()) {
        throw StateError("DenseArray: gradient buffer not allocated");
    }
    return grad_;
}

void DenseArray::zero_grad() {
    if (!grad_.empty()) {
        std::fill(grad_.begin(), grad_.end(), 0.0);
    }
}

void DenseArray::drop_grad() { grad_.clear(); }

void DenseArray::resize_rows(std::size_t rows, double fill) {
    if (shape_.size() < 2) {
        throw DimensionError("DenseArray::resize_rows needs a rank >= 2 array");
    }
    const std::size_t width = row_width();
    shape_[0] = rows;
    values_.resize(rows * width, fill);
    grad_.clear();
}

void DenseArray::check_finite(const std::string& what) const {
    if (!all_finite(values_)) {
        throw NumericError(what + ": non-finite value");
    }
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

} // namespace bags
