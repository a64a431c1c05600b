// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensor value type. Row-major flat buffer, shape-checked on
// construction, finite by invariant. Gradients live next to the data so the
// tape and the optimizer can accumulate into them directly.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace simdetr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward first touches it

  Tensor() : shape{}, data{0.0} {}

  Tensor(Shape s, std::vector<double> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (numel(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match buffer of size " +
                                  std::to_string(data.size()));
    }
    if (!all_finite(data)) {
      throw std::runtime_error("Tensor: non-finite value in buffer");
    }
  }

  static Tensor zeros(Shape s, bool rg = false) {
    std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
  }

  static Tensor full(Shape s, double v, bool rg = false) {
    std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v), rg);
  }

  static Tensor scalar(double v, bool rg = false) { return Tensor({}, {v}, rg); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  double& at(std::size_t i) { return data.at(i); }
  double at(std::size_t i) const { return data.at(i); }

  // rank-2 access
  double& at(std::size_t r, std::size_t c) {
    return data[r * shape.at(1) + c];
  }
  double at(std::size_t r, std::size_t c) const {
    return data[r * shape.at(1) + c];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }
};

}  // namespace simdetr
