// SPDX-License-Identifier: Apache-2.0
//
// Probing suite: query-to-segment assignment, intra/inter query similarity
// distributions, cross-layer matching consistency, and global-vs-local score
// pairs. Everything reads detached trace values and never touches training.
#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "simdetr/matchloss.hpp"
#include "simdetr/metrics.hpp"
#include "simdetr/model.hpp"
#include "simdetr/span.hpp"
#include "simdetr/util.hpp"

namespace simdetr {

struct DiagnosticsReport {
  std::vector<double> intra_sims;
  std::vector<double> inter_sims;

  // counts for the layer pair (l, l+1), aggregated over a corpus and split by
  // ground-truth multiplicity of the sample
  struct ConsistencyStat {
    std::size_t retained_single = 0;
    std::size_t total_single = 0;
    std::size_t retained_multi = 0;
    std::size_t total_multi = 0;
  };
  std::vector<ConsistencyStat> consistency;  // size = layers - 1

  std::vector<std::pair<double, double>> global_local;  // (p_cls, attention IoU)

  double mean_intra() const { return mean_of(intra_sims); }
  double mean_inter() const { return mean_of(inter_sims); }

  // mean consistency over layer pairs for the multi-GT subset
  double mean_consistency_multi() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& c : consistency) {
      if (c.total_multi > 0) {
        sum += static_cast<double>(c.retained_multi) / static_cast<double>(c.total_multi);
        ++n;
      }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
  }

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

// Query i is assigned to the ground truth with the highest IoU against its
// predicted span, provided that IoU reaches 0.5; ties take the smaller index.
inline std::vector<int> assign_queries(const std::vector<Span>& pred_spans,
                                       const std::vector<Span>& gts) {
  std::vector<int> assignment(pred_spans.size(), -1);
  for (std::size_t i = 0; i < pred_spans.size(); ++i) {
    double best = 0.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      double v = temporal_iou(pred_spans[i], gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best >= 0.5) assignment[i] = best_g;
  }
  return assignment;
}

namespace detail {

inline double plain_cosine(const double* a, const double* b, std::size_t n) {
  double na = 0.0, nb = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
    dot += a[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Cosine similarity for every unordered pair of assigned queries; same
// assigned segment goes to `intra`, different segments to `inter`.
inline void similarity_histograms(const std::vector<double>& query_features, std::size_t m,
                                  std::size_t c, const std::vector<int>& assignment,
                                  std::vector<double>& intra, std::vector<double>& inter) {
  for (std::size_t i = 0; i < m; ++i) {
    if (assignment[i] < 0) continue;
    for (std::size_t j = i + 1; j < m; ++j) {
      if (assignment[j] < 0) continue;
      double sim =
          detail::plain_cosine(&query_features[i * c], &query_features[j * c], c);
      if (assignment[i] == assignment[j]) {
        intra.push_back(sim);
      } else {
        inter.push_back(sim);
      }
    }
  }
}

// Updates retained/total counts for each consecutive layer pair from one
// sample's per-layer matches.
inline void accumulate_consistency(const std::vector<MatchResult>& per_layer,
                                   std::size_t n_gts,
                                   std::vector<DiagnosticsReport::ConsistencyStat>& stats) {
  if (per_layer.size() < 2) return;
  if (stats.size() != per_layer.size() - 1) {
    throw std::invalid_argument("accumulate_consistency: layer count mismatch");
  }
  bool multi = n_gts > 1;
  for (std::size_t l = 0; l + 1 < per_layer.size(); ++l) {
    std::vector<int> cur(n_gts, -1), nxt(n_gts, -1);
    for (auto [g, q] : per_layer[l].pairs) cur[g] = q;
    for (auto [g, q] : per_layer[l + 1].pairs) nxt[g] = q;
    for (std::size_t g = 0; g < n_gts; ++g) {
      bool retained = cur[g] >= 0 && cur[g] == nxt[g];
      if (multi) {
        stats[l].total_multi += 1;
        stats[l].retained_multi += retained ? 1 : 0;
      } else {
        stats[l].total_single += 1;
        stats[l].retained_single += retained ? 1 : 0;
      }
    }
  }
}

// Global score is the classification confidence; local score is the set IoU
// between the cross-attention mask (binarized at the uniform level 1/N) and
// the assigned segment's frame mask.
inline std::vector<std::pair<double, double>> global_local_scores(const DecoderTrace& trace,
                                                                  const std::vector<Span>& gts) {
  const LayerTrace& last = trace.layers.back();
  std::vector<int> assignment = assign_queries(last.spans(), gts);
  const auto& attn = last.cross_attn.value();
  const auto& p_cls = last.p_cls.value();
  std::size_t m = last.cross_attn.shape()[0];
  std::size_t n = last.cross_attn.shape()[1];
  double level = 1.0 / static_cast<double>(n);

  std::vector<std::pair<double, double>> out;
  for (std::size_t i = 0; i < m; ++i) {
    if (assignment[i] < 0) continue;
    std::vector<int> gt_mask = frames_inside(gts[assignment[i]], n);
    std::size_t inter = 0, uni = 0;
    for (std::size_t j = 0; j < n; ++j) {
      bool on = attn[i * n + j] >= level;
      bool in_gt = gt_mask[j] != 0;
      inter += (on && in_gt) ? 1 : 0;
      uni += (on || in_gt) ? 1 : 0;
    }
    double local = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    out.emplace_back(p_cls[i], local);
  }
  return out;
}

// Full probe pass over a corpus: forward each sample, run the training
// matcher per layer for consistency, and collect last-layer similarity and
// global/local statistics.
inline DiagnosticsReport diagnose(const std::vector<VideoSample>& corpus, ParamStore& store,
                                  const ModelConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("diagnose: empty corpus");
  DiagnosticsReport report;
  report.consistency.assign(cfg.num_decoder_layers > 0 ? cfg.num_decoder_layers - 1 : 0, {});

  for (const VideoSample& sample : corpus) {
    Tape tape;
    DecoderTrace trace = forward(tape, sample, store, cfg);

    std::vector<MatchResult> per_layer;
    for (const LayerTrace& layer : trace.layers) {
      auto cost = matching_cost(layer.spans(), layer.p_cls.value(), sample.gt_spans,
                                cfg.mu_l1, cfg.mu_giou, cfg.mu_cls);
      per_layer.push_back(hungarian_match(cost));
    }
    accumulate_consistency(per_layer, sample.gt_spans.size(), report.consistency);

    const LayerTrace& last = trace.layers.back();
    std::vector<int> assignment = assign_queries(last.spans(), sample.gt_spans);
    similarity_histograms(last.queries.value(), cfg.num_queries, cfg.hidden_dim, assignment,
                          report.intra_sims, report.inter_sims);

    auto gl = global_local_scores(trace, sample.gt_spans);
    report.global_local.insert(report.global_local.end(), gl.begin(), gl.end());
  }
  return report;
}

// CSV exports with fixed headers: similarity.csv (kind,value),
// consistency.csv (layer_pair,subset,fraction), global_local.csv (global,local).
inline void write_diagnostics_csv(const DiagnosticsReport& report,
                                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::string s = "kind,value\n";
    for (double v : report.intra_sims) s += "intra," + fmt_f64(v) + "\n";
    for (double v : report.inter_sims) s += "inter," + fmt_f64(v) + "\n";
    write_file_atomic(dir / "similarity.csv", s);
  }
  {
    std::string s = "layer_pair,subset,fraction\n";
    for (std::size_t l = 0; l < report.consistency.size(); ++l) {
      const auto& c = report.consistency[l];
      std::string pair = std::to_string(l + 1) + "-" + std::to_string(l + 2);
      if (c.total_single > 0) {
        s += pair + ",single," +
             fmt_f64(static_cast<double>(c.retained_single) /
                     static_cast<double>(c.total_single)) +
             "\n";
      }
      if (c.total_multi > 0) {
        s += pair + ",multi," +
             fmt_f64(static_cast<double>(c.retained_multi) /
                     static_cast<double>(c.total_multi)) +
             "\n";
      }
      std::size_t total = c.total_single + c.total_multi;
      if (total > 0) {
        s += pair + ",all," +
             fmt_f64(static_cast<double>(c.retained_single + c.retained_multi) /
                     static_cast<double>(total)) +
             "\n";
      }
    }
    write_file_atomic(dir / "consistency.csv", s);
  }
  {
    std::string s = "global,local\n";
    for (auto [g, l] : report.global_local) s += fmt_f64(g) + "," + fmt_f64(l) + "\n";
    write_file_atomic(dir / "global_local.csv", s);
  }
}

}  // namespace simdetr
