// SPDX-License-Identifier: Apache-2.0
//
// DETR-style temporal grounding model: a cross-attention multimodal encoder,
// a stack of decoder layers with interleaved self-/cross-attention, and
// shared prediction heads (span, confidence, IoU) plus a frame saliency head.
//
// Both mechanism hooks (query grouping/ranking and global-local bridging) can
// be toggled off, which reduces the forward pass to the vanilla architecture.
//
// The encoder output is position-free (identical input frames produce
// identical rows). Temporal position enters only through fixed sinusoidal
// tags added to the decoder's cross-attention memory; without them spans
// would not be decodable from content alone.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simdetr/dataset.hpp"
#include "simdetr/mechanisms.hpp"
#include "simdetr/params.hpp"
#include "simdetr/rng.hpp"
#include "simdetr/span.hpp"
#include "simdetr/tape.hpp"
#include "simdetr/util.hpp"

namespace simdetr {

struct ModelConfig {
  std::size_t hidden_dim = 32;
  std::size_t num_queries = 10;
  std::size_t num_decoder_layers = 3;
  std::size_t mlp_hidden = 16;  // hidden width of the modulation MLP
  bool enable_qgr = true;
  bool enable_glb = true;
  double lambda_l1 = 10.0;
  double lambda_giou = 1.0;
  double lambda_cls = 4.0;
  double lambda_sal = 1.0;
  double lambda_bridge = 1.0;
  double lambda_iou = 1.0;
  double mu_l1 = 10.0;
  double mu_giou = 1.0;
  double mu_cls = 4.0;
  double background_weight = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_queries < 1 || num_decoder_layers < 1 || hidden_dim < 2 || mlp_hidden < 1) {
      throw std::invalid_argument("ModelConfig: dims must be positive");
    }
    for (double w : {lambda_l1, lambda_giou, lambda_cls, lambda_sal, lambda_bridge, lambda_iou,
                     mu_l1, mu_giou, mu_cls, background_weight}) {
      if (w < 0.0) throw std::invalid_argument("ModelConfig: weights must be nonnegative");
    }
  }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"hidden_dim", c.hidden_dim},
           {"num_queries", c.num_queries},
           {"num_decoder_layers", c.num_decoder_layers},
           {"mlp_hidden", c.mlp_hidden},
           {"enable_qgr", c.enable_qgr},
           {"enable_glb", c.enable_glb},
           {"lambda_l1", c.lambda_l1},
           {"lambda_giou", c.lambda_giou},
           {"lambda_cls", c.lambda_cls},
           {"lambda_sal", c.lambda_sal},
           {"lambda_bridge", c.lambda_bridge},
           {"lambda_iou", c.lambda_iou},
           {"mu_l1", c.mu_l1},
           {"mu_giou", c.mu_giou},
           {"mu_cls", c.mu_cls},
           {"background_weight", c.background_weight},
           {"seed", c.seed}};
}

inline void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_queries = j.value("num_queries", d.num_queries);
  c.num_decoder_layers = j.value("num_decoder_layers", d.num_decoder_layers);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.enable_qgr = j.value("enable_qgr", d.enable_qgr);
  c.enable_glb = j.value("enable_glb", d.enable_glb);
  c.lambda_l1 = j.value("lambda_l1", d.lambda_l1);
  c.lambda_giou = j.value("lambda_giou", d.lambda_giou);
  c.lambda_cls = j.value("lambda_cls", d.lambda_cls);
  c.lambda_sal = j.value("lambda_sal", d.lambda_sal);
  c.lambda_bridge = j.value("lambda_bridge", d.lambda_bridge);
  c.lambda_iou = j.value("lambda_iou", d.lambda_iou);
  c.mu_l1 = j.value("mu_l1", d.mu_l1);
  c.mu_giou = j.value("mu_giou", d.mu_giou);
  c.mu_cls = j.value("mu_cls", d.mu_cls);
  c.background_weight = j.value("background_weight", d.background_weight);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

// One-to-one assignment of ground-truth segments to queries.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (gt_index, query_index)
  double total_cost = 0.0;
};

struct LayerTrace {
  Var queries;     // M x C updated query features
  Var starts;      // M span starts in [0,1]
  Var ends;        // M span ends, ends[i] >= starts[i]
  Var cls_logits;  // M
  Var p_cls;       // M in [0,1]
  Var p_iou;       // M in [0,1]
  Var cross_attn;  // M x N, rows sum to 1
  std::optional<Var> s_attn;            // M x M modulation, absent for layer 1
  std::optional<MatchResult> match;     // filled in by total_loss

  std::vector<Span> spans() const {
    const auto& s = starts.value();
    const auto& e = ends.value();
    std::vector<Span> out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out.emplace_back(s[i], e[i]);
    return out;
  }
};

struct DecoderTrace {
  Var memory;           // N x C encoder output (position-free)
  Var saliency_logits;  // N
  Var saliency;         // N in [0,1]
  std::vector<LayerTrace> layers;
};

// Resolves parameter names to tape leaves, one leaf per parameter per tape.
// Tests can override individual parameters with externally built Vars.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name) {
    if (auto it = overrides_.find(name); it != overrides_.end()) return it->second;
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    Var v = tape_.leaf(store_.at(name));
    cache_.emplace(name, v);
    return v;
  }

  void set_override(const std::string& name, Var v) { overrides_[name] = v; }
  Tape& tape() { return tape_; }
  ParamStore& store() { return store_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  std::map<std::string, Var> cache_;
  std::map<std::string, Var> overrides_;
};

namespace detail {

inline Tensor xavier(Shape shape, Rng rng) {
  std::size_t fan_in = shape.size() == 2 ? shape[0] : shape[0];
  std::size_t fan_out = shape.size() == 2 ? shape[1] : shape[0];
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(shape, true);
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

inline void add_linear(ParamStore& store, const std::string& prefix, std::size_t in,
                       std::size_t out, std::uint64_t seed) {
  store.add(prefix + ".w", xavier({in, out}, Rng(seed, "init/" + prefix + ".w")));
  store.add(prefix + ".b", Tensor::zeros({out}, true));
}

inline void add_attn(ParamStore& store, const std::string& prefix, std::size_t dim,
                     std::uint64_t seed) {
  for (const char* part : {"q", "k", "v", "o"}) {
    add_linear(store, prefix + "." + part, dim, dim, seed);
  }
}

}  // namespace detail

// Builds the full parameter set. The set depends only on dimensions, never on
// the mechanism toggles, so ablations share byte-identical initializations.
inline ParamStore init_params(const ModelConfig& cfg, std::size_t in_dim) {
  cfg.validate();
  std::uint64_t seed = cfg.seed;
  std::size_t c = cfg.hidden_dim;
  ParamStore store;
  store.rng_seed = seed;

  detail::add_linear(store, "input.frame_proj", in_dim, c, seed);
  detail::add_linear(store, "input.text_proj", in_dim, c, seed);

  detail::add_attn(store, "encoder.ca", c, seed);
  store.add("encoder.ln.gamma", Tensor::full({c}, 1.0, true));
  store.add("encoder.ln.beta", Tensor::zeros({c}, true));
  detail::add_linear(store, "encoder.ffn.fc1", c, c, seed);
  detail::add_linear(store, "encoder.ffn.fc2", c, c, seed);
  detail::add_linear(store, "saliency", c, 1, seed);

  {
    Tensor q = Tensor::zeros({cfg.num_queries, c}, true);
    Rng rng(seed, "init/queries");
    for (double& v : q.data) v = 0.02 * rng.normal();
    store.add("queries", std::move(q));
  }

  for (std::size_t l = 0; l < cfg.num_decoder_layers; ++l) {
    std::string p = "decoder." + std::to_string(l);
    detail::add_attn(store, p + ".sa", c, seed);
    detail::add_attn(store, p + ".ca", c, seed);
    store.add(p + ".ln.gamma", Tensor::full({c}, 1.0, true));
    store.add(p + ".ln.beta", Tensor::zeros({c}, true));
    detail::add_linear(store, p + ".ffn.fc1", c, c, seed);
    detail::add_linear(store, p + ".ffn.fc2", c, c, seed);
    detail::add_linear(store, p + ".mod.fc1", 1, cfg.mlp_hidden, seed);
    detail::add_linear(store, p + ".mod.fc2", cfg.mlp_hidden, 1, seed);
  }

  detail::add_linear(store, "heads.span.fc1", c, c, seed);
  detail::add_linear(store, "heads.span.fc2", c, 2, seed);
  detail::add_linear(store, "heads.cls", c, 1, seed);
  detail::add_linear(store, "heads.iou.fc1", c, c, seed);
  detail::add_linear(store, "heads.iou.fc2", c, 1, seed);

  store.add("glb.log_tau", Tensor::scalar(std::log(10.0), true));
  return store;
}

inline Var linear(ParamBinder& pb, const std::string& prefix, const Var& x) {
  return add(matmul(x, pb(prefix + ".w")), pb(prefix + ".b"));
}

inline AttnParams bind_attn(ParamBinder& pb, const std::string& prefix) {
  return AttnParams{pb(prefix + ".q.w"), pb(prefix + ".q.b"), pb(prefix + ".k.w"),
                    pb(prefix + ".k.b"), pb(prefix + ".v.w"), pb(prefix + ".v.b"),
                    pb(prefix + ".o.w"), pb(prefix + ".o.b")};
}

inline ModulationParams bind_modulation(ParamBinder& pb, const std::string& prefix) {
  return ModulationParams{pb(prefix + ".fc1.w"), pb(prefix + ".fc1.b"), pb(prefix + ".fc2.w"),
                          pb(prefix + ".fc2.b")};
}

// Fixed sinusoidal position tags over frame indices.
inline Tensor position_tags(std::size_t n_frames, std::size_t dim) {
  Tensor t = Tensor::zeros({n_frames, dim});
  for (std::size_t j = 0; j < n_frames; ++j) {
    for (std::size_t k = 0; k < dim; k += 2) {
      double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                             static_cast<double>(dim));
      double angle = static_cast<double>(j) * freq;
      t.data[j * dim + k] = std::sin(angle);
      if (k + 1 < dim) t.data[j * dim + k + 1] = std::cos(angle);
    }
  }
  return t;
}

struct EncodeOut {
  Var memory;           // N x C
  Var saliency_logits;  // N
  Var saliency;         // N
};

// Multimodal encoder: projected frames attend over projected text tokens,
// then layer-norm, residual, feed-forward. Saliency is a linear+sigmoid head
// on the fused features.
inline EncodeOut encode(ParamBinder& pb, const VideoSample& sample) {
  Tape& tape = pb.tape();
  std::size_t n = sample.n_frames;
  std::size_t l = sample.text_len;
  std::size_t in_dim = sample.feature_dim;
  const Shape& proj_shape = pb.store().at("input.frame_proj.w").shape;
  if (proj_shape[0] != in_dim) {
    throw std::invalid_argument("encode: sample feature dim " + std::to_string(in_dim) +
                                " does not match input projection " + shape_str(proj_shape));
  }
  std::size_t c = proj_shape[1];

  std::vector<double> fflat;
  fflat.reserve(n * in_dim);
  for (const auto& row : sample.frame_features) fflat.insert(fflat.end(), row.begin(), row.end());
  std::vector<double> tflat;
  tflat.reserve(l * in_dim);
  for (const auto& row : sample.text_features) tflat.insert(tflat.end(), row.begin(), row.end());

  Var frames = tape.constant({n, in_dim}, std::move(fflat));
  Var text = tape.constant({l, in_dim}, std::move(tflat));

  Var tf = linear(pb, "input.frame_proj", frames);
  Var tw = linear(pb, "input.text_proj", text);

  double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
  Var q = linear(pb, "encoder.ca.q", tf);
  Var k = linear(pb, "encoder.ca.k", tw);
  Var v = linear(pb, "encoder.ca.v", tw);
  Var attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_c));
  Var ca = linear(pb, "encoder.ca.o", matmul(attn, v));
  Var res = add(layer_norm(ca, pb("encoder.ln.gamma"), pb("encoder.ln.beta")), tf);
  Var memory = linear(pb, "encoder.ffn.fc2", relu(linear(pb, "encoder.ffn.fc1", res)));

  Var sal_logits = reshape(linear(pb, "saliency", memory), {n});
  return EncodeOut{memory, sal_logits, sigmoid(sal_logits)};
}

// One decoder layer: (optionally modulated) self-attention, cross-attention
// over the memory, then MLP(LayerNorm(Q_ca) + Q). Returns the updated queries
// and the row-stochastic cross-attention matrix.
inline std::pair<Var, Var> decoder_layer(ParamBinder& pb, const std::string& prefix,
                                         const Var& queries, const Var& memory,
                                         const Var& s_attn = Var()) {
  std::size_t c = queries.shape().at(1);
  double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

  Var q_sa = modulated_self_attention(queries, s_attn, bind_attn(pb, prefix + ".sa"));

  Var ca_q = linear(pb, prefix + ".ca.q", q_sa);
  Var ca_k = linear(pb, prefix + ".ca.k", memory);
  Var ca_v = linear(pb, prefix + ".ca.v", memory);
  Var attn = softmax_rows(scale(matmul(ca_q, transpose(ca_k)), inv_sqrt_c));
  Var q_ca = linear(pb, prefix + ".ca.o", matmul(attn, ca_v));

  Var pre = add(layer_norm(q_ca, pb(prefix + ".ln.gamma"), pb(prefix + ".ln.beta")), queries);
  Var q_hat = linear(pb, prefix + ".ffn.fc2", relu(linear(pb, prefix + ".ffn.fc1", pre)));
  return {q_hat, attn};
}

struct HeadOut {
  Var starts, ends, cls_logits, p_cls, p_iou;
};

// Shared prediction heads. Span logits pass through sigmoid and are ordered
// by (min, max), so every span satisfies 0 <= start <= end <= 1.
inline HeadOut predict_heads(ParamBinder& pb, const Var& q_hat) {
  Var h = relu(linear(pb, "heads.span.fc1", q_hat));
  Var span_logits = linear(pb, "heads.span.fc2", h);
  Var u = sigmoid(select_col(span_logits, 0));
  Var v = sigmoid(select_col(span_logits, 1));
  Var starts = emin(u, v);
  Var ends = emax(u, v);

  std::size_t m = q_hat.shape().at(0);
  Var cls_logits = reshape(linear(pb, "heads.cls", q_hat), {m});
  Var ih = relu(linear(pb, "heads.iou.fc1", q_hat));
  Var iou_logits = reshape(linear(pb, "heads.iou.fc2", ih), {m});
  return HeadOut{starts, ends, cls_logits, sigmoid(cls_logits), sigmoid(iou_logits)};
}

// Full forward pass. With enable_qgr, layer l > 1 modulates its
// self-attention from layer l-1's detached spans and priority scores; layer 1
// always runs unmodulated because no prior spans exist.
inline DecoderTrace forward(ParamBinder& pb, const VideoSample& sample, const ModelConfig& cfg) {
  cfg.validate();
  Tape& tape = pb.tape();
  DecoderTrace trace;
  EncodeOut enc = encode(pb, sample);
  trace.memory = enc.memory;
  trace.saliency_logits = enc.saliency_logits;
  trace.saliency = enc.saliency;

  Var memory_pos = add(enc.memory, tape.constant(position_tags(sample.n_frames, cfg.hidden_dim)));

  Var queries = pb("queries");
  if (queries.shape() != Shape{cfg.num_queries, cfg.hidden_dim}) {
    throw std::invalid_argument("forward: query parameter shape does not match config");
  }

  for (std::size_t l = 0; l < cfg.num_decoder_layers; ++l) {
    std::string prefix = "decoder." + std::to_string(l);
    Var s_attn;  // undefined = unmodulated
    if (cfg.enable_qgr && l > 0) {
      const LayerTrace& prev = trace.layers.back();
      IntraDistance dist = span_border_distance(prev.spans());
      RankRelation rank = rank_relation(prev.p_cls.value(), prev.p_iou.value());
      s_attn = attention_modulation(tape, dist, rank, bind_modulation(pb, prefix + ".mod"));
    }
    auto [q_hat, attn] = decoder_layer(pb, prefix, queries, memory_pos, s_attn);
    HeadOut heads = predict_heads(pb, q_hat);
    LayerTrace lt;
    lt.queries = q_hat;
    lt.starts = heads.starts;
    lt.ends = heads.ends;
    lt.cls_logits = heads.cls_logits;
    lt.p_cls = heads.p_cls;
    lt.p_iou = heads.p_iou;
    lt.cross_attn = attn;
    if (s_attn.defined()) lt.s_attn = s_attn;
    trace.layers.push_back(std::move(lt));
    queries = q_hat;
  }
  return trace;
}

inline DecoderTrace forward(Tape& tape, const VideoSample& sample, ParamStore& store,
                            const ModelConfig& cfg) {
  ParamBinder pb(tape, store);
  return forward(pb, sample, cfg);
}

// ---------------------------------------------------------------------------
// checkpoint I/O: the numcore parameter block plus the model configuration
// needed to rebuild the network at load time.

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& store,
                            const ModelConfig& cfg) {
  json j = params_to_json(store);
  j["model"] = cfg;
  write_file_atomic(path, j.dump());
}

struct Checkpoint {
  ParamStore params;
  ModelConfig model;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  json j = json::parse(read_file(path));
  Checkpoint ck;
  ck.params = params_from_json(j);
  if (!j.contains("model")) {
    throw std::invalid_argument("checkpoint " + path.string() + ": missing model config");
  }
  ck.model = j.at("model").get<ModelConfig>();
  return ck;
}

}  // namespace simdetr
