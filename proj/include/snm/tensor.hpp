#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace snm {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major matrix of doubles. Vectors are 1 x n rows or n x 1
/// columns; a scalar is 1 x 1. A default-constructed tensor is "unset" and
/// has no shape.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(checked_size(rows, cols), fill) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != checked_size(rows, cols)) {
      throw ShapeError("tensor value count " + std::to_string(values_.size()) +
                       " does not match shape " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
  }

  static Tensor row(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(1, n, std::move(values));
  }
  static Tensor column(std::vector<double> values) {
    const auto n = values.size();
    return Tensor(n, 1, std::move(values));
  }
  static Tensor scalar(double value) { return Tensor(1, 1, value); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  std::array<std::size_t, 2> shape() const noexcept { return {rows_, cols_}; }
  bool same_shape(const Tensor& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool is_scalar() const noexcept { return rows_ == 1 && cols_ == 1; }
  bool is_vector() const noexcept { return rows_ == 1 || cols_ == 1; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  double item() const {
    if (!is_scalar()) throw ShapeError("item() on a non-scalar tensor");
    return values_[0];
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& storage() const noexcept { return values_; }

  std::span<double> row_span(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row_span(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  Eigen::Map<RowMatrix> matrix() {
    return {values_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }
  Eigen::Map<const RowMatrix> matrix() const {
    return {values_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  void fill(double value) { std::fill(values_.begin(), values_.end(), value); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.values_ == b.values_;
  }

 private:
  static std::size_t checked_size(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("tensor dimensions must be positive, got " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
    return rows * cols;
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

}  // namespace snm
