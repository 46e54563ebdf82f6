#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "robustda/error.hpp"

namespace robustda {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of doubles.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    check_shape();
    data.assign(numel(shape), fill);
  }

  Tensor(std::vector<std::size_t> s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (data.size() != numel(shape))
      throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(shape));
  }

  bool operator==(const Tensor&) const = default;

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor row(std::vector<double> values) {
    auto n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ShapeError("tensor: from_rows needs at least one row");
    Tensor t = matrix(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows[0].size()) throw ShapeError("tensor: ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), t.data.begin() + r * t.cols());
    }
    return t;
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : 1) : shape[1]; }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  double* row_ptr(std::size_t r) { return data.data() + r * cols(); }
  const double* row_ptr(std::size_t r) const { return data.data() + r * cols(); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  /// Copy of rows [begin, begin + count) of a rank-2 tensor.
  Tensor slice_rows(std::size_t begin, std::size_t count) const {
    Tensor t = matrix(count, cols());
    std::copy(data.begin() + begin * cols(), data.begin() + (begin + count) * cols(), t.data.begin());
    return t;
  }

  Tensor gather_rows(const std::vector<std::size_t>& idx) const {
    Tensor t = matrix(idx.size(), cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(row_ptr(idx[i]), row_ptr(idx[i]) + cols(), t.row_ptr(i));
    return t;
  }

  std::vector<double> row_vector(std::size_t r) const {
    return std::vector<double>(row_ptr(r), row_ptr(r) + cols());
  }

private:
  void check_shape() const {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
};

inline void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError(what + ": non-finite value");
}

}  // namespace robustda
