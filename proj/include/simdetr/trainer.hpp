// SPDX-License-Identifier: Apache-2.0
//
// Deterministic training loop: seeded shuffling, per-sample tapes with
// gradients averaged over the batch, global-norm clipping, AdamW steps, and
// periodic evaluation/diagnostics capture. Identical inputs and seeds give
// bit-identical parameters.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "simdetr/dataset.hpp"
#include "simdetr/diagnostics.hpp"
#include "simdetr/matchloss.hpp"
#include "simdetr/metrics.hpp"
#include "simdetr/model.hpp"
#include "simdetr/optim.hpp"
#include "simdetr/util.hpp"

namespace simdetr {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;  // max global grad norm; 0 disables
  int eval_every = 10;
  int diag_every = 0;  // 0 disables diagnostics capture
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: bad sizes");
    if (lr <= 0.0 && lr != 0.0) throw std::invalid_argument("TrainConfig: bad lr");
    if (lr < 0.0 || weight_decay < 0.0 || grad_clip < 0.0) {
      throw std::invalid_argument("TrainConfig: negative hyperparameter");
    }
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},       {"batch_size", c.batch_size},
           {"lr", c.lr},               {"weight_decay", c.weight_decay},
           {"grad_clip", c.grad_clip}, {"eval_every", c.eval_every},
           {"diag_every", c.diag_every}, {"seed", c.seed}};
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.diag_every = j.value("diag_every", d.diag_every);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

struct EpochRow {
  int epoch = 0;
  LossBreakdown mean_loss;
  std::optional<double> val_map_avg;
  std::optional<double> val_r1_05;
};

struct RunLog {
  std::vector<EpochRow> rows;
  std::vector<std::pair<int, DiagnosticsReport>> diagnostics;  // (epoch, report)
};

struct TrainResult {
  ParamStore params;
  RunLog log;
};

inline TrainResult train(const std::vector<VideoSample>& train_corpus,
                         const std::vector<VideoSample>& val_corpus, const ModelConfig& mcfg,
                         const TrainConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  if (train_corpus.empty()) throw std::invalid_argument("train: empty training corpus");
  if (val_corpus.empty()) throw std::invalid_argument("train: empty validation corpus");
  std::size_t in_dim = train_corpus[0].feature_dim;
  for (const auto& s : train_corpus) {
    if (s.feature_dim != in_dim) throw std::invalid_argument("train: inconsistent feature dims");
  }
  for (const auto& s : val_corpus) {
    if (s.feature_dim != in_dim) throw std::invalid_argument("train: inconsistent feature dims");
  }

  TrainResult result;
  result.params = init_params(mcfg, in_dim);
  result.params.rng_seed = tcfg.seed;
  OptimState optim;
  optim.hyper.lr = tcfg.lr;
  optim.hyper.weight_decay = tcfg.weight_decay;

  std::vector<std::size_t> order(train_corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    Rng shuffle_rng(tcfg.seed, "shuffle/epoch" + std::to_string(epoch));
    shuffle_rng.shuffle(order);

    LossBreakdown epoch_sum;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      std::size_t stop = std::min(order.size(), start + tcfg.batch_size);
      double inv_batch = 1.0 / static_cast<double>(stop - start);
      result.params.zero_grads();
      for (std::size_t b = start; b < stop; ++b) {
        const VideoSample& sample = train_corpus[order[b]];
        try {
          Tape tape;
          ParamBinder pb(tape, result.params);
          DecoderTrace trace = forward(pb, sample, mcfg);
          LossResult loss = total_loss(pb, trace, sample, mcfg);
          tape.backward(loss.total, inv_batch);
          epoch_sum.l1 += loss.breakdown.l1;
          epoch_sum.giou += loss.breakdown.giou;
          epoch_sum.cls += loss.breakdown.cls;
          epoch_sum.saliency += loss.breakdown.saliency;
          epoch_sum.bridge += loss.breakdown.bridge;
          epoch_sum.iou += loss.breakdown.iou;
          epoch_sum.total += loss.breakdown.total;
          ++seen;
        } catch (const std::runtime_error& e) {
          throw std::runtime_error("train: aborted at epoch " + std::to_string(epoch) +
                                   ", sample " + sample.id + ": " + e.what());
        }
      }
      if (tcfg.grad_clip > 0.0) clip_grad_norm(result.params, tcfg.grad_clip);
      adamw_step(result.params, optim);
    }

    EpochRow row;
    row.epoch = epoch;
    double inv = 1.0 / static_cast<double>(seen);
    row.mean_loss.l1 = epoch_sum.l1 * inv;
    row.mean_loss.giou = epoch_sum.giou * inv;
    row.mean_loss.cls = epoch_sum.cls * inv;
    row.mean_loss.saliency = epoch_sum.saliency * inv;
    row.mean_loss.bridge = epoch_sum.bridge * inv;
    row.mean_loss.iou = epoch_sum.iou * inv;
    row.mean_loss.total = epoch_sum.total * inv;
    if (tcfg.eval_every > 0 && (epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs)) {
      MetricsReport val = evaluate(val_corpus, result.params, mcfg);
      row.val_map_avg = val.map_avg;
      row.val_r1_05 = val.r1_05;
    }
    result.log.rows.push_back(row);
    if (tcfg.diag_every > 0 && epoch % tcfg.diag_every == 0) {
      result.log.diagnostics.emplace_back(epoch, diagnose(val_corpus, result.params, mcfg));
    }
  }
  return result;
}

inline void write_runlog_csv(const RunLog& log, const std::filesystem::path& path) {
  std::string s = "epoch,total,l1,giou,cls,saliency,bridge,iou,val_map_avg,val_r1_05\n";
  for (const EpochRow& r : log.rows) {
    s += std::to_string(r.epoch) + "," + fmt_f64(r.mean_loss.total) + "," +
         fmt_f64(r.mean_loss.l1) + "," + fmt_f64(r.mean_loss.giou) + "," +
         fmt_f64(r.mean_loss.cls) + "," + fmt_f64(r.mean_loss.saliency) + "," +
         fmt_f64(r.mean_loss.bridge) + "," + fmt_f64(r.mean_loss.iou) + ",";
    s += r.val_map_avg ? fmt_f64(*r.val_map_avg) : "";
    s += ",";
    s += r.val_r1_05 ? fmt_f64(*r.val_r1_05) : "";
    s += "\n";
  }
  write_file_atomic(path, s);
}

struct AblationRow {
  std::size_t queries = 0;
  std::size_t layers = 0;
  double map_avg = 0.0;
  double r1_05 = 0.0;
};

// Trains one independent seeded run per (queries, layers) cell and reports
// validation metrics for each.
inline std::vector<AblationRow> ablate(const std::vector<VideoSample>& train_corpus,
                                       const std::vector<VideoSample>& val_corpus,
                                       const ModelConfig& base, const TrainConfig& tcfg,
                                       const std::vector<std::size_t>& query_counts,
                                       const std::vector<std::size_t>& layer_counts) {
  std::vector<AblationRow> rows;
  for (std::size_t q : query_counts) {
    for (std::size_t l : layer_counts) {
      ModelConfig cfg = base;
      cfg.num_queries = q;
      cfg.num_decoder_layers = l;
      TrainResult res = train(train_corpus, val_corpus, cfg, tcfg);
      MetricsReport val = evaluate(val_corpus, res.params, cfg);
      rows.push_back({q, l, val.map_avg, val.r1_05});
    }
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows,
                               const std::filesystem::path& path) {
  std::string s = "queries,layers,map_avg,r1_05\n";
  for (const AblationRow& r : rows) {
    s += std::to_string(r.queries) + "," + std::to_string(r.layers) + "," +
         fmt_f64(r.map_avg) + "," + fmt_f64(r.r1_05) + "\n";
  }
  write_file_atomic(path, s);
}

}  // namespace simdetr
