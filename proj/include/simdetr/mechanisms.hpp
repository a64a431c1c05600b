// SPDX-License-Identifier: Apache-2.0
//
// Query Grouping & Ranking and Global-Local Bridging.
//
// QGR reshapes query-to-query self-attention from two detached signals: the
// pairwise span border distance (grouping) and the sign of the
// confidence*IoU priority comparison (ranking). Their product is mapped
// through a shared scalar MLP and a sigmoid into a multiplicative mask on
// the pre-softmax attention logits.
//
// GLB is a query-to-frame alignment loss: frame similarities are squashed
// through sigmoid(tau * cos) and the loss rewards mass inside the matched
// ground-truth span while penalizing mass outside, normalized by the span's
// frame count. Range [-1, 0].
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "simdetr/span.hpp"
#include "simdetr/tape.hpp"

namespace simdetr {

// Pairwise span L2 border distance (Eq. "S_intra"); symmetric, zero diagonal.
struct IntraDistance {
  std::size_t m = 0;
  std::vector<double> values;  // m x m row-major
  double at(std::size_t i, std::size_t j) const { return values[i * m + j]; }
};

// Pairwise priority relation: +1 when query i's cls*IoU product is at least
// query j's, else -1. Ties (including the diagonal) give +1 both ways.
struct RankRelation {
  std::size_t m = 0;
  std::vector<int> values;  // m x m row-major, entries +1/-1
  int at(std::size_t i, std::size_t j) const { return values[i * m + j]; }
};

inline IntraDistance span_border_distance(const std::vector<Span>& spans) {
  IntraDistance d;
  d.m = spans.size();
  d.values.assign(d.m * d.m, 0.0);
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = i + 1; j < d.m; ++j) {
      double ds = spans[i].start - spans[j].start;
      double de = spans[i].end - spans[j].end;
      double v = std::sqrt(ds * ds + de * de);
      d.values[i * d.m + j] = v;
      d.values[j * d.m + i] = v;
    }
  }
  return d;
}

inline RankRelation rank_relation(const std::vector<double>& p_cls,
                                  const std::vector<double>& p_iou) {
  if (p_cls.size() != p_iou.size()) {
    throw std::invalid_argument("rank_relation: size mismatch");
  }
  std::size_t m = p_cls.size();
  RankRelation r;
  r.m = m;
  r.values.assign(m * m, 1);
  std::vector<double> prod(m);
  for (std::size_t i = 0; i < m; ++i) prod[i] = p_cls[i] * p_iou[i];
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      r.values[i * m + j] = prod[i] >= prod[j] ? 1 : -1;
    }
  }
  return r;
}

// Parameters of the shared scalar MLP (1 -> hidden -> 1, ReLU).
struct ModulationParams {
  Var w1;  // (1, hidden)
  Var b1;  // (hidden)
  Var w2;  // (hidden, 1)
  Var b2;  // (1)
};

// S_attn = sigmoid(MLP(S_intra o R_rank)), elementwise over the M x M grid.
// The inputs are detached by construction (plain values); gradients flow
// into the MLP parameters only.
inline Var attention_modulation(Tape& tape, const IntraDistance& s_intra,
                                const RankRelation& r_rank, const ModulationParams& p) {
  if (s_intra.m != r_rank.m) throw std::invalid_argument("attention_modulation: size mismatch");
  std::size_t m = s_intra.m;
  std::vector<double> x(m * m);
  for (std::size_t i = 0; i < m * m; ++i) {
    x[i] = s_intra.values[i] * static_cast<double>(r_rank.values[i]);
  }
  Var in = tape.constant({m * m, 1}, std::move(x));
  Var h = relu(add(matmul(in, p.w1), p.b1));
  Var out = add(matmul(h, p.w2), p.b2);
  return reshape(sigmoid(out), {m, m});
}

// Self-attention parameters (shared shape with cross-attention blocks).
struct AttnParams {
  Var wq, bq;
  Var wk, bk;
  Var wv, bv;
  Var wo, bo;
};

// Self-attention with the QGR mask multiplied onto the pre-softmax logits.
// Rows of the attention matrix still sum to 1, so outputs remain convex
// combinations of the value rows.
inline Var modulated_self_attention(const Var& queries, const Var& s_attn,
                                    const AttnParams& p) {
  const Shape& s = queries.shape();
  if (s.size() != 2) throw std::invalid_argument("modulated_self_attention: rank-2 queries");
  double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(s[1]));
  Var q = add(matmul(queries, p.wq), p.bq);
  Var k = add(matmul(queries, p.wk), p.bk);
  Var v = add(matmul(queries, p.wv), p.bv);
  Var logits = scale(matmul(q, transpose(k)), inv_sqrt_c);
  if (s_attn.defined()) logits = mul(logits, s_attn);
  Var attn = softmax_rows(logits);
  return add(matmul(matmul(attn, v), p.wo), p.bo);
}

// Query-to-frame alignment loss for one matched (query, span) pair.
// memory is the encoder output (N x C); tau a positive scalar.
inline Var bridge_loss(Tape& tape, const Var& query, const Var& memory, const Span& gt,
                       const Var& tau) {
  const Shape& ms = memory.shape();
  if (ms.size() != 2 || query.shape() != Shape{ms[1]}) {
    throw std::invalid_argument("bridge_loss: memory (N,C) and query (C) required");
  }
  std::size_t n = ms[0];
  std::vector<int> mask = frames_inside(gt, n);
  double n_in = 0.0;
  std::vector<double> in_w(n), out_w(n);
  for (std::size_t j = 0; j < n; ++j) {
    in_w[j] = mask[j] ? 1.0 : 0.0;
    out_w[j] = mask[j] ? 0.0 : 1.0;
    n_in += in_w[j];
  }
  if (n_in == 0.0) {
    throw std::invalid_argument("bridge_loss: ground-truth span covers no frames");
  }
  Var cos = rowwise_cosine(memory, query);
  Var z = sigmoid(mul(cos, tau));
  Var numer = sum(mul(z, tape.constant({n}, std::move(in_w))));
  Var denom = add_const(sum(mul(z, tape.constant({n}, std::move(out_w)))), n_in);
  return neg(div(numer, denom));
}

}  // namespace simdetr
