// SPDX-License-Identifier: Apache-2.0
//
// Grounding evaluation: top-1 recall at IoU thresholds, per-sample average
// precision averaged over samples and thresholds, and mean top-1 IoU.
#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "simdetr/model.hpp"
#include "simdetr/span.hpp"

namespace simdetr {

struct ScoredSpan {
  Span span;
  double score = 0.0;
};

struct PredictionSet {
  std::vector<ScoredSpan> preds;
  std::vector<Span> gts;
};

struct MetricsReport {
  double r1_05 = 0.0;
  double r1_07 = 0.0;
  double map_05 = 0.0;
  double map_075 = 0.0;
  double map_avg = 0.0;
  double miou = 0.0;
  std::size_t n_samples = 0;
};

inline json metrics_to_json(const MetricsReport& r) {
  return json{{"r1", {{"0.5", r.r1_05}, {"0.7", r.r1_07}}},
              {"map", {{"0.5", r.map_05}, {"0.75", r.map_075}}},
              {"map_avg", r.map_avg},
              {"miou", r.miou},
              {"n_samples", r.n_samples}};
}

namespace detail {

// Stable ranking: score descending, then span start ascending, then index.
inline std::vector<std::size_t> rank_predictions(const std::vector<ScoredSpan>& preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
    if (preds[a].span.start != preds[b].span.start) {
      return preds[a].span.start < preds[b].span.start;
    }
    return a < b;
  });
  return order;
}

inline double best_iou(const Span& pred, const std::vector<Span>& gts) {
  double best = 0.0;
  for (const Span& g : gts) best = std::max(best, temporal_iou(pred, g));
  return best;
}

}  // namespace detail

// Fraction of samples whose top-1 prediction reaches IoU >= theta with some
// ground truth. `top1` and `gts` are parallel per-sample lists.
inline double recall_at(const std::vector<Span>& top1, const std::vector<std::vector<Span>>& gts,
                        double theta) {
  if (top1.empty() || top1.size() != gts.size()) {
    throw std::invalid_argument("recall_at: empty or mismatched inputs");
  }
  std::size_t hits = 0;
  for (std::size_t s = 0; s < top1.size(); ++s) {
    if (detail::best_iou(top1[s], gts[s]) >= theta) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(top1.size());
}

// Per-sample AP at one IoU threshold: predictions ranked by score, greedy
// matching against unclaimed ground truths (best IoU first, smaller index on
// ties), AP = sum of precision@k over true positives divided by #GT.
inline double average_precision(const std::vector<ScoredSpan>& preds,
                                const std::vector<Span>& gts, double theta) {
  if (gts.empty()) throw std::invalid_argument("average_precision: no ground truths");
  std::vector<std::size_t> order = detail::rank_predictions(preds);
  std::vector<char> claimed(gts.size(), 0);
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Span& p = preds[order[rank]].span;
    double best = 0.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      double v = temporal_iou(p, gts[g]);
      if (v >= theta && v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      claimed[best_g] = 1;
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(gts.size());
}

// Metrics over explicit prediction sets; `evaluate` builds these from a model.
inline MetricsReport evaluate_predictions(const std::vector<PredictionSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("evaluate: empty corpus");
  MetricsReport r;
  r.n_samples = sets.size();

  std::vector<Span> top1;
  std::vector<std::vector<Span>> gts;
  for (const auto& s : sets) {
    if (s.preds.empty()) throw std::invalid_argument("evaluate: sample without predictions");
    top1.push_back(s.preds[detail::rank_predictions(s.preds)[0]].span);
    gts.push_back(s.gts);
  }
  r.r1_05 = recall_at(top1, gts, 0.5);
  r.r1_07 = recall_at(top1, gts, 0.7);

  double miou = 0.0;
  for (std::size_t s = 0; s < sets.size(); ++s) miou += detail::best_iou(top1[s], gts[s]);
  r.miou = miou / static_cast<double>(sets.size());

  double avg_sum = 0.0;
  for (int step = 0; step < 10; ++step) {
    double theta = 0.50 + 0.05 * step;
    double ap_sum = 0.0;
    for (const auto& s : sets) ap_sum += average_precision(s.preds, s.gts, theta);
    double map_theta = ap_sum / static_cast<double>(sets.size());
    if (step == 0) r.map_05 = map_theta;
    if (step == 5) r.map_075 = map_theta;
    avg_sum += map_theta;
  }
  r.map_avg = avg_sum / 10.0;
  return r;
}

// Runs the model over the corpus and scores each query by p_cls * p_iou from
// the last decoder layer.
inline MetricsReport evaluate(const std::vector<VideoSample>& corpus, ParamStore& store,
                              const ModelConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
  std::vector<PredictionSet> sets;
  sets.reserve(corpus.size());
  for (const VideoSample& sample : corpus) {
    Tape tape;
    DecoderTrace trace = forward(tape, sample, store, cfg);
    const LayerTrace& last = trace.layers.back();
    std::vector<Span> spans = last.spans();
    const auto& pc = last.p_cls.value();
    const auto& pi = last.p_iou.value();
    PredictionSet set;
    for (std::size_t i = 0; i < spans.size(); ++i) {
      set.preds.push_back({spans[i], pc[i] * pi[i]});
    }
    set.gts = sample.gt_spans;
    sets.push_back(std::move(set));
  }
  return evaluate_predictions(sets);
}

}  // namespace simdetr
