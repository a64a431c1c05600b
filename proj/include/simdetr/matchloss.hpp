// SPDX-License-Identifier: Apache-2.0
//
// Bipartite query-to-segment matching and the training loss: L1 + gIoU +
// classification + saliency (Moment-DETR family), plus the bridge and
// IoU-head terms. Matching runs on detached values and is never
// differentiated through.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

#include "simdetr/mechanisms.hpp"
#include "simdetr/model.hpp"
#include "simdetr/span.hpp"
#include "simdetr/tape.hpp"

namespace simdetr {

inline constexpr double kSaliencyMargin = 0.2;

// Generalized IoU for intervals: IoU minus the normalized hull slack,
// range [-1, 1]. Degenerate pairs (zero union or hull) fall back to 0 terms.
inline double giou_1d(const Span& a, const Span& b) {
  double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  double uni = a.length() + b.length() - inter;
  double hull = std::max(a.end, b.end) - std::min(a.start, b.start);
  double iou = uni > 0.0 ? inter / uni : 0.0;
  double slack = hull > 0.0 ? (hull - uni) / hull : 0.0;
  return iou - slack;
}

// Differentiable gIoU between two spans given as scalar Vars. Callers must
// guarantee a nonzero union (true whenever one span has positive length).
inline Var giou_var(const Var& as, const Var& ae, const Var& bs, const Var& be) {
  Var inter = relu(sub(emin(ae, be), emax(as, bs)));
  Var uni = sub(add(sub(ae, as), sub(be, bs)), inter);
  Var hull = sub(emax(ae, be), emin(as, bs));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

// Moment-DETR matching cost: mu_l1 * L1(span) + mu_giou * (1 - gIoU) +
// mu_cls * (1 - p_cls). Rows are ground-truth segments, columns queries.
inline std::vector<std::vector<double>> matching_cost(const std::vector<Span>& pred_spans,
                                                      const std::vector<double>& p_cls,
                                                      const std::vector<Span>& gts,
                                                      double mu_l1, double mu_giou,
                                                      double mu_cls) {
  if (gts.empty()) throw std::invalid_argument("matching_cost: at least one ground truth");
  if (pred_spans.size() != p_cls.size()) {
    throw std::invalid_argument("matching_cost: span/score count mismatch");
  }
  std::vector<std::vector<double>> cost(gts.size(), std::vector<double>(pred_spans.size()));
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (std::size_t i = 0; i < pred_spans.size(); ++i) {
      double l1 = std::fabs(pred_spans[i].start - gts[g].start) +
                  std::fabs(pred_spans[i].end - gts[g].end);
      cost[g][i] = mu_l1 * l1 + mu_giou * (1.0 - giou_1d(pred_spans[i], gts[g])) +
                   mu_cls * (1.0 - p_cls[i]);
    }
  }
  return cost;
}

// Minimum-cost injective assignment of K ground truths to M queries (K <= M).
// Exact depth-first search with an admissible row-minimum bound; assignments
// are enumerated in lexicographic pair-list order and only strictly better
// totals replace the incumbent, so among equal-cost optima the
// lexicographically smallest pair list wins.
inline MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
  std::size_t k = cost.size();
  if (k == 0) throw std::invalid_argument("hungarian_match: empty cost matrix");
  std::size_t m = cost[0].size();
  for (const auto& row : cost) {
    if (row.size() != m) throw std::invalid_argument("hungarian_match: ragged cost matrix");
    for (double v : row) {
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian_match: non-finite cost");
    }
  }
  if (k > m) {
    throw std::invalid_argument("hungarian_match: more targets (" + std::to_string(k) +
                                ") than queries (" + std::to_string(m) + ")");
  }

  // suffix_bound[g] = sum over rows >= g of that row's global minimum
  std::vector<double> suffix_bound(k + 1, 0.0);
  for (std::size_t g = k; g-- > 0;) {
    double mn = cost[g][0];
    for (std::size_t i = 1; i < m; ++i) mn = std::min(mn, cost[g][i]);
    suffix_bound[g] = suffix_bound[g + 1] + mn;
  }

  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_cols;
  std::vector<int> cols(k, -1);
  std::vector<char> used(m, 0);

  auto dfs = [&](auto&& self, std::size_t g, double acc) -> void {
    if (acc + suffix_bound[g] >= best) return;
    if (g == k) {
      best = acc;
      best_cols.assign(cols.begin(), cols.end());
      return;
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (used[i]) continue;
      used[i] = 1;
      cols[g] = static_cast<int>(i);
      self(self, g + 1, acc + cost[g][i]);
      used[i] = 0;
    }
    cols[g] = -1;
  };
  dfs(dfs, 0, 0.0);

  MatchResult result;
  result.total_cost = 0.0;
  for (std::size_t g = 0; g < k; ++g) {
    result.pairs.emplace_back(static_cast<int>(g), best_cols[g]);
    result.total_cost += cost[g][best_cols[g]];
  }
  return result;
}

struct LossBreakdown {
  double l1 = 0.0;
  double giou = 0.0;
  double cls = 0.0;
  double saliency = 0.0;
  double bridge = 0.0;
  double iou = 0.0;
  double total = 0.0;
};

struct LossResult {
  LossBreakdown breakdown;
  Var total;
};

// Total training loss for one sample. Per decoder layer: Hungarian matching,
// then span L1, (1 - gIoU), the bridge term and the IoU-head L1 averaged over
// matched pairs, plus weighted binary cross-entropy over all queries; layer
// terms are averaged over layers. Saliency is a single margin hinge between
// in-span and out-of-span frame scores. Matched pairs are accumulated in
// query order, so the result does not depend on the order of the gt list.
inline LossResult total_loss(ParamBinder& pb, DecoderTrace& trace, const VideoSample& sample,
                             const ModelConfig& cfg) {
  if (sample.gt_spans.empty()) {
    throw std::invalid_argument("total_loss: sample without ground-truth spans");
  }
  Tape& tape = pb.tape();
  std::size_t n_layers = trace.layers.size();
  std::size_t m = cfg.num_queries;

  Var l1_term = tape.constant(0.0);
  Var giou_term = tape.constant(0.0);
  Var cls_term = tape.constant(0.0);
  Var bridge_term = tape.constant(0.0);
  Var iou_term = tape.constant(0.0);
  Var tau = cfg.enable_glb ? vexp(pb("glb.log_tau")) : Var();

  for (LayerTrace& layer : trace.layers) {
    std::vector<Span> spans = layer.spans();
    auto cost = matching_cost(spans, layer.p_cls.value(), sample.gt_spans, cfg.mu_l1,
                              cfg.mu_giou, cfg.mu_cls);
    MatchResult match = hungarian_match(cost);
    layer.match = match;

    std::vector<std::pair<int, int>> pairs = match.pairs;  // (gt, query)
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    double inv_np = 1.0 / static_cast<double>(pairs.size());

    Var l1_sum = tape.constant(0.0);
    Var giou_sum = tape.constant(0.0);
    Var bridge_sum = tape.constant(0.0);
    Var iou_sum = tape.constant(0.0);
    for (auto [g, qi] : pairs) {
      const Span& gt = sample.gt_spans[g];
      Var ps = select(layer.starts, qi);
      Var pe = select(layer.ends, qi);
      Var gs = tape.constant(gt.start);
      Var ge = tape.constant(gt.end);
      l1_sum = add(l1_sum, add(vabs(sub(ps, gs)), vabs(sub(pe, ge))));
      giou_sum = add(giou_sum, sub(tape.constant(1.0), giou_var(ps, pe, gs, ge)));
      double iou_target = temporal_iou(spans[qi], gt);
      iou_sum = add(iou_sum, vabs(sub(select(layer.p_iou, qi), tape.constant(iou_target))));
      if (cfg.enable_glb) {
        Var q = select_row(layer.queries, qi);
        bridge_sum = add(bridge_sum, bridge_loss(tape, q, trace.memory, gt, tau));
      }
    }
    l1_term = add(l1_term, scale(l1_sum, inv_np));
    giou_term = add(giou_term, scale(giou_sum, inv_np));
    iou_term = add(iou_term, scale(iou_sum, inv_np));
    if (cfg.enable_glb) bridge_term = add(bridge_term, scale(bridge_sum, inv_np));

    std::vector<double> targets(m, 0.0), weights(m, cfg.background_weight);
    for (auto [g, qi] : pairs) {
      targets[qi] = 1.0;
      weights[qi] = 1.0;
    }
    Var cls = bce_with_logits(layer.cls_logits, std::move(targets), std::move(weights));
    cls_term = add(cls_term, scale(cls, 1.0 / static_cast<double>(m)));
  }

  double inv_layers = 1.0 / static_cast<double>(n_layers);
  l1_term = scale(l1_term, inv_layers);
  giou_term = scale(giou_term, inv_layers);
  cls_term = scale(cls_term, inv_layers);
  iou_term = scale(iou_term, inv_layers);
  if (cfg.enable_glb) bridge_term = scale(bridge_term, inv_layers);

  // saliency hinge: computed once on encoder scores; degenerate populations
  // (no in-span or no out-of-span frame) contribute zero
  Var sal_term = tape.constant(0.0);
  {
    std::vector<int> mask = frames_inside_any(sample.gt_spans, sample.n_frames);
    double n_in = 0.0, n_out = 0.0;
    std::vector<double> in_w(mask.size()), out_w(mask.size());
    for (std::size_t j = 0; j < mask.size(); ++j) {
      in_w[j] = mask[j] ? 1.0 : 0.0;
      out_w[j] = mask[j] ? 0.0 : 1.0;
      n_in += in_w[j];
      n_out += out_w[j];
    }
    if (n_in > 0.0 && n_out > 0.0) {
      Var in_mean = scale(sum(mul(trace.saliency, tape.constant({mask.size()}, in_w))), 1.0 / n_in);
      Var out_mean =
          scale(sum(mul(trace.saliency, tape.constant({mask.size()}, out_w))), 1.0 / n_out);
      sal_term = relu(sub(tape.constant(kSaliencyMargin), sub(in_mean, out_mean)));
    }
  }

  Var total = scale(l1_term, cfg.lambda_l1);
  total = add(total, scale(giou_term, cfg.lambda_giou));
  total = add(total, scale(cls_term, cfg.lambda_cls));
  total = add(total, scale(sal_term, cfg.lambda_sal));
  if (cfg.enable_glb) total = add(total, scale(bridge_term, cfg.lambda_bridge));
  total = add(total, scale(iou_term, cfg.lambda_iou));

  LossResult result;
  result.total = total;
  result.breakdown.l1 = l1_term.scalar();
  result.breakdown.giou = giou_term.scalar();
  result.breakdown.cls = cls_term.scalar();
  result.breakdown.saliency = sal_term.scalar();
  result.breakdown.bridge = cfg.enable_glb ? bridge_term.scalar() : 0.0;
  result.breakdown.iou = iou_term.scalar();
  result.breakdown.total = total.scalar();
  return result;
}

}  // namespace simdetr
