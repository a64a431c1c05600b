// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient checker: compares reverse-mode gradients against
// central differences componentwise.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "simdetr/tape.hpp"
#include "simdetr/tensor.hpp"

namespace simdetr {

struct GradCheckReport {
  bool pass = false;
  double worst_rel_err = 0.0;
  std::size_t worst_index = 0;
  double autodiff_value = 0.0;  // gradient component at worst_index
  double fd_value = 0.0;
  std::string note;
};

// rel err = |a-b| / max(1, |a|, |b|)
inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// F: (Tape&, Var) -> Var producing a scalar loss from the checked tensor.
template <typename F>
GradCheckReport grad_check(F&& f, const Tensor& x, double h = 1e-6, double tol = 1e-6) {
  GradCheckReport report;

  Tensor xa(x.shape, x.data, true);
  {
    Tape tape;
    Var vx = tape.leaf(xa);
    Var loss = f(tape, vx);
    if (loss.size() != 1) {
      report.note = "f did not return a scalar";
      return report;
    }
    tape.backward(loss);
  }

  auto eval_at = [&](const std::vector<double>& data) -> double {
    Tensor xc(x.shape, data, false);
    Tape tape;
    Var vx = tape.leaf(xc);
    return f(tape, vx).scalar();
  };

  report.pass = true;
  std::vector<double> pt = x.data;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    double orig = pt[i];
    double fp = 0.0, fm = 0.0;
    try {
      pt[i] = orig + h;
      fp = eval_at(pt);
      pt[i] = orig - h;
      fm = eval_at(pt);
    } catch (const std::exception& e) {
      pt[i] = orig;
      report.pass = false;
      report.worst_index = i;
      report.note = std::string(e.what()) + " at component " + std::to_string(i);
      return report;
    }
    pt[i] = orig;
    if (std::isnan(fp) || std::isnan(fm)) {
      report.pass = false;
      report.worst_index = i;
      report.note = "NaN in f evaluation at component " + std::to_string(i);
      return report;
    }
    double fd = (fp - fm) / (2.0 * h);
    double ad = xa.grad[i];
    double e = rel_err(ad, fd);
    if (e > report.worst_rel_err) {
      report.worst_rel_err = e;
      report.worst_index = i;
      report.autodiff_value = ad;
      report.fd_value = fd;
    }
    if (e > tol) report.pass = false;
  }
  return report;
}

}  // namespace simdetr
