// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used only by tests: exhaustive
// assignment search, a straight-line loss recomputation, brute-force metrics,
// and a mechanism-free forward pass for baseline equivalence checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "simdetr/simdetr.hpp"

namespace oracles {

using namespace simdetr;

// Plain enumeration over all injective assignments in lexicographic pair-list
// order; keeps the first assignment achieving the minimum. No pruning.
inline MatchResult brute_force_assignment(const std::vector<std::vector<double>>& cost) {
  std::size_t k = cost.size();
  std::size_t m = cost[0].size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_cols;
  std::vector<int> cols(k, -1);
  std::vector<char> used(m, 0);
  auto rec = [&](auto&& self, std::size_t g, double acc) -> void {
    if (g == k) {
      if (acc < best) {
        best = acc;
        best_cols.assign(cols.begin(), cols.end());
      }
      return;
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (used[i]) continue;
      used[i] = 1;
      cols[g] = static_cast<int>(i);
      self(self, g + 1, acc + cost[g][i]);
      used[i] = 0;
    }
  };
  rec(rec, 0, 0.0);
  MatchResult r;
  r.total_cost = 0.0;
  for (std::size_t g = 0; g < k; ++g) {
    r.pairs.emplace_back(static_cast<int>(g), best_cols[g]);
    r.total_cost += cost[g][best_cols[g]];
  }
  return r;
}

// Straight-line recomputation of the total loss from detached trace values
// and parameter data, following the loss formula term by term.
inline LossBreakdown reference_total_loss(const DecoderTrace& trace, const VideoSample& sample,
                                          const ModelConfig& cfg, const ParamStore& store) {
  LossBreakdown out;
  double tau = std::exp(store.at("glb.log_tau").data[0]);
  std::size_t n_layers = trace.layers.size();
  std::size_t m = cfg.num_queries;
  const auto& memory = trace.memory.value();
  std::size_t n = sample.n_frames;
  std::size_t c = cfg.hidden_dim;

  for (const LayerTrace& layer : trace.layers) {
    std::vector<Span> spans = layer.spans();
    auto cost = matching_cost(spans, layer.p_cls.value(), sample.gt_spans, cfg.mu_l1,
                              cfg.mu_giou, cfg.mu_cls);
    MatchResult match = brute_force_assignment(cost);

    double l1 = 0.0, gi = 0.0, br = 0.0, io = 0.0;
    for (auto [g, qi] : match.pairs) {
      const Span& gt = sample.gt_spans[g];
      l1 += std::fabs(spans[qi].start - gt.start) + std::fabs(spans[qi].end - gt.end);
      gi += 1.0 - giou_1d(spans[qi], gt);
      io += std::fabs(layer.p_iou.value()[qi] - temporal_iou(spans[qi], gt));
      if (cfg.enable_glb) {
        std::vector<int> mask = frames_inside(gt, n);
        double numer = 0.0, denom_out = 0.0, n_in = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double cos = 0.0, nq = 0.0, nf = 0.0, dot = 0.0;
          for (std::size_t d = 0; d < c; ++d) {
            double qv = layer.queries.value()[qi * c + d];
            double fv = memory[j * c + d];
            nq += qv * qv;
            nf += fv * fv;
            dot += qv * fv;
          }
          if (nq > 0.0 && nf > 0.0) cos = dot / (std::sqrt(nq) * std::sqrt(nf));
          double z = 1.0 / (1.0 + std::exp(-tau * cos));
          if (mask[j]) {
            numer += z;
            n_in += 1.0;
          } else {
            denom_out += z;
          }
        }
        br += -numer / (denom_out + n_in);
      }
    }
    double inv_np = 1.0 / static_cast<double>(match.pairs.size());
    out.l1 += l1 * inv_np;
    out.giou += gi * inv_np;
    out.iou += io * inv_np;
    out.bridge += br * inv_np;

    std::vector<char> matched(m, 0);
    for (auto [g, qi] : match.pairs) matched[qi] = 1;
    double cls = 0.0;
    const auto& logits = layer.cls_logits.value();
    for (std::size_t i = 0; i < m; ++i) {
      double y = matched[i] ? 1.0 : 0.0;
      double w = matched[i] ? 1.0 : cfg.background_weight;
      double z = logits[i];
      cls += w * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z))));
    }
    out.cls += cls / static_cast<double>(m);
  }
  double inv_l = 1.0 / static_cast<double>(n_layers);
  out.l1 *= inv_l;
  out.giou *= inv_l;
  out.cls *= inv_l;
  out.iou *= inv_l;
  out.bridge *= inv_l;
  if (!cfg.enable_glb) out.bridge = 0.0;

  std::vector<int> mask = frames_inside_any(sample.gt_spans, n);
  double in_sum = 0.0, out_sum = 0.0, n_in = 0.0, n_out = 0.0;
  const auto& sal = trace.saliency.value();
  for (std::size_t j = 0; j < n; ++j) {
    if (mask[j]) {
      in_sum += sal[j];
      n_in += 1.0;
    } else {
      out_sum += sal[j];
      n_out += 1.0;
    }
  }
  if (n_in > 0.0 && n_out > 0.0) {
    out.saliency = std::max(0.0, kSaliencyMargin - (in_sum / n_in - out_sum / n_out));
  }

  out.total = cfg.lambda_l1 * out.l1 + cfg.lambda_giou * out.giou + cfg.lambda_cls * out.cls +
              cfg.lambda_sal * out.saliency + cfg.lambda_bridge * out.bridge +
              cfg.lambda_iou * out.iou;
  return out;
}

// Mechanism-free forward pass written as a straight line with no toggle
// branches; mirrors the vanilla architecture op for op.
inline DecoderTrace baseline_forward(Tape& tape, const VideoSample& sample, ParamStore& store,
                                     const ModelConfig& cfg) {
  ParamBinder pb(tape, store);
  std::size_t n = sample.n_frames;
  std::size_t l = sample.text_len;
  std::size_t in_dim = sample.feature_dim;
  std::size_t c = cfg.hidden_dim;
  double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

  std::vector<double> fflat, tflat;
  for (const auto& row : sample.frame_features) fflat.insert(fflat.end(), row.begin(), row.end());
  for (const auto& row : sample.text_features) tflat.insert(tflat.end(), row.begin(), row.end());
  Var frames = tape.constant({n, in_dim}, std::move(fflat));
  Var text = tape.constant({l, in_dim}, std::move(tflat));

  auto lin = [&](const std::string& p, Var x) { return add(matmul(x, pb(p + ".w")), pb(p + ".b")); };

  Var tf = lin("input.frame_proj", frames);
  Var tw = lin("input.text_proj", text);
  Var q = lin("encoder.ca.q", tf);
  Var k = lin("encoder.ca.k", tw);
  Var v = lin("encoder.ca.v", tw);
  Var attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_c));
  Var ca = lin("encoder.ca.o", matmul(attn, v));
  Var res = add(layer_norm(ca, pb("encoder.ln.gamma"), pb("encoder.ln.beta")), tf);
  Var memory = lin("encoder.ffn.fc2", relu(lin("encoder.ffn.fc1", res)));
  Var sal_logits = reshape(lin("saliency", memory), {n});

  DecoderTrace trace;
  trace.memory = memory;
  trace.saliency_logits = sal_logits;
  trace.saliency = sigmoid(sal_logits);

  Var mem_pos = add(memory, tape.constant(position_tags(n, c)));
  Var queries = pb("queries");
  for (std::size_t li = 0; li < cfg.num_decoder_layers; ++li) {
    std::string p = "decoder." + std::to_string(li);
    Var sq = lin(p + ".sa.q", queries);
    Var sk = lin(p + ".sa.k", queries);
    Var sv = lin(p + ".sa.v", queries);
    Var sattn = softmax_rows(scale(matmul(sq, transpose(sk)), inv_sqrt_c));
    Var q_sa = lin(p + ".sa.o", matmul(sattn, sv));
    Var cq = lin(p + ".ca.q", q_sa);
    Var ck = lin(p + ".ca.k", mem_pos);
    Var cv = lin(p + ".ca.v", mem_pos);
    Var cattn = softmax_rows(scale(matmul(cq, transpose(ck)), inv_sqrt_c));
    Var q_ca = lin(p + ".ca.o", matmul(cattn, cv));
    Var pre = add(layer_norm(q_ca, pb(p + ".ln.gamma"), pb(p + ".ln.beta")), queries);
    Var q_hat = lin(p + ".ffn.fc2", relu(lin(p + ".ffn.fc1", pre)));

    Var h = relu(lin("heads.span.fc1", q_hat));
    Var span_logits = lin("heads.span.fc2", h);
    Var u = sigmoid(select_col(span_logits, 0));
    Var w = sigmoid(select_col(span_logits, 1));
    LayerTrace lt;
    lt.queries = q_hat;
    lt.starts = emin(u, w);
    lt.ends = emax(u, w);
    lt.cls_logits = reshape(lin("heads.cls", q_hat), {cfg.num_queries});
    lt.p_cls = sigmoid(lt.cls_logits);
    Var ih = relu(lin("heads.iou.fc1", q_hat));
    lt.p_iou = sigmoid(reshape(lin("heads.iou.fc2", ih), {cfg.num_queries}));
    lt.cross_attn = cattn;
    trace.layers.push_back(std::move(lt));
    queries = q_hat;
  }
  return trace;
}

// Brute-force metrics straight from the definitions.
inline MetricsReport brute_force_metrics(const std::vector<PredictionSet>& sets) {
  MetricsReport r;
  r.n_samples = sets.size();

  auto iou = [](const Span& a, const Span& b) {
    double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    double uni = (a.end - a.start) + (b.end - b.start) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
  };

  auto ranked = [](const std::vector<ScoredSpan>& preds) {
    std::vector<std::size_t> order(preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
      return preds[a].span.start < preds[b].span.start;
    });
    return order;
  };

  auto ap_at = [&](const PredictionSet& s, double theta) {
    auto order = ranked(s.preds);
    std::vector<char> claimed(s.gts.size(), 0);
    double ap = 0.0;
    int tp = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const Span& p = s.preds[order[rank]].span;
      int pick = -1;
      double best = -1.0;
      for (std::size_t g = 0; g < s.gts.size(); ++g) {
        if (claimed[g]) continue;
        double v = iou(p, s.gts[g]);
        if (v >= theta && v > best) {
          best = v;
          pick = static_cast<int>(g);
        }
      }
      if (pick >= 0) {
        claimed[pick] = 1;
        ++tp;
        ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
      }
    }
    return ap / static_cast<double>(s.gts.size());
  };

  double hits05 = 0.0, hits07 = 0.0, miou = 0.0;
  for (const auto& s : sets) {
    const Span& top = s.preds[ranked(s.preds)[0]].span;
    double best = 0.0;
    for (const Span& g : s.gts) best = std::max(best, iou(top, g));
    miou += best;
    if (best >= 0.5) hits05 += 1.0;
    if (best >= 0.7) hits07 += 1.0;
  }
  double ns = static_cast<double>(sets.size());
  r.r1_05 = hits05 / ns;
  r.r1_07 = hits07 / ns;
  r.miou = miou / ns;

  double avg = 0.0;
  for (int step = 0; step < 10; ++step) {
    double theta = 0.50 + 0.05 * step;
    double sum = 0.0;
    for (const auto& s : sets) sum += ap_at(s, theta);
    double m = sum / ns;
    if (step == 0) r.map_05 = m;
    if (step == 5) r.map_075 = m;
    avg += m;
  }
  r.map_avg = avg / 10.0;
  return r;
}

}  // namespace oracles
