// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay: the decay term goes straight onto the
// weights and never enters the moment estimates.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "simdetr/params.hpp"

namespace simdetr {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimState {
  AdamWConfig hyper;
  std::int64_t step = 0;
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments> moments;
};

inline void adamw_step(ParamStore& store, OptimState& state) {
  state.step += 1;
  const AdamWConfig& h = state.hyper;
  double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : store.params) {
    if (!t.requires_grad) continue;
    if (t.grad.size() != t.data.size()) {
      throw std::runtime_error("adamw_step: missing gradient for parameter " + name);
    }
    if (!all_finite(t.grad)) {
      throw std::runtime_error("adamw_step: non-finite gradient for parameter " + name);
    }
    auto& mom = state.moments[name];
    if (mom.m.size() != t.data.size()) {
      mom.m.assign(t.data.size(), 0.0);
      mom.v.assign(t.data.size(), 0.0);
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      double g = t.grad[i];
      t.data[i] -= h.lr * h.weight_decay * t.data[i];
      mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * g;
      mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * g * g;
      double mhat = mom.m[i] / bc1;
      double vhat = mom.v[i] / bc2;
      t.data[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

// Scales all gradients so the global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : store.params) {
    for (double g : t.grad) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (auto& [name, t] : store.params) {
      for (double& g : t.grad) g *= s;
    }
  }
  return norm;
}

}  // namespace simdetr
