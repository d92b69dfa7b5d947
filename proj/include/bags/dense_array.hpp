#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bags {

/// Row-major array of doubles with an optional gradient buffer of the same shape.
/// Every trainable quantity (MLP weights, splat parameters, root poses) lives in one.
class DenseArray {
  public:
    DenseArray() = default;
    explicit DenseArray(std::vector<std::size_t> shape, double fill = 0.0);
    DenseArray(std::initializer_list<std::size_t> shape, double fill = 0.0)
        : DenseArray(std::vector<std::size_t>(shape), fill) {}

    static DenseArray from_values(std::vector<std::size_t> shape, std::vector<double> values);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    /// Leading dimension (1 for rank-0/1 arrays) and the product of the rest.
    std::size_t rows() const noexcept;
    std::size_t row_width() const noexcept;

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t row, std::size_t col) { return values_[row * row_width() + col]; }
    double at(std::size_t row, std::size_t col) const { return values_[row * row_width() + col]; }

    bool has_grad() const noexcept { return !grad_.empty() || values_.empty(); }
    /// Gradient buffer, allocated (zeroed) on first access.
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();
    void drop_grad();

    /// Changes the leading dimension; new rows are filled with `fill`, the gradient is dropped.
    void resize_rows(std::size_t rows, double fill = 0.0);

    /// Throws NumericError naming `what` if any value is NaN or infinite.
    void check_finite(const std::string& what) const;

  private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
    std::vector<double> grad_;
};

bool all_finite(std::span<const double> values);

} // namespace bags
