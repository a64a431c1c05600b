// SPDX-License-Identifier: Apache-2.0
//
// Synthetic temporal-grounding corpora. Every sample carries several
// ground-truth segments that share one sentence embedding, so queries for
// different segments see identical semantics; background frames follow a
// distractor direction with configurable similarity to the sentence.
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "simdetr/rng.hpp"
#include "simdetr/span.hpp"
#include "simdetr/tensor.hpp"
#include "simdetr/util.hpp"

namespace simdetr {

using json = nlohmann::json;

struct VideoSample {
  std::string id;
  std::size_t n_frames = 0;
  std::size_t feature_dim = 0;
  std::size_t text_len = 0;
  std::vector<std::vector<double>> frame_features;  // n_frames x feature_dim
  std::vector<std::vector<double>> text_features;   // text_len x feature_dim
  std::vector<Span> gt_spans;
  std::vector<int> saliency;  // 0/1 per frame
};

struct GenConfig {
  std::size_t n_frames = 32;
  std::size_t feature_dim = 16;
  std::size_t text_len = 8;
  std::size_t segments_min = 1;
  std::size_t segments_max = 3;
  double min_seg_len = 0.08;
  double max_seg_len = 0.25;
  double noise_sigma = 0.1;
  double distractor_sim = 0.0;  // rho, cosine of distractor vs sentence
  std::size_t samples = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_frames == 0 || feature_dim < 2 || text_len == 0 || samples == 0) {
      throw std::invalid_argument("GenConfig: dims and sample count must be positive");
    }
    if (segments_min < 1 || segments_min > segments_max) {
      throw std::invalid_argument("GenConfig: bad segment count range");
    }
    if (!(0.0 < min_seg_len && min_seg_len <= max_seg_len && max_seg_len <= 1.0)) {
      throw std::invalid_argument("GenConfig: bad segment length range");
    }
    if (min_seg_len * static_cast<double>(n_frames) < 1.0) {
      throw std::invalid_argument("GenConfig: min segment length must cover one frame");
    }
    if (static_cast<double>(segments_max) * min_seg_len > 1.0) {
      throw std::invalid_argument("GenConfig: segment count does not fit in the video");
    }
    if (!(0.0 <= distractor_sim && distractor_sim < 1.0)) {
      throw std::invalid_argument("GenConfig: distractor similarity must be in [0,1)");
    }
    if (noise_sigma < 0.0) throw std::invalid_argument("GenConfig: negative noise sigma");
  }
};

inline void to_json(json& j, const GenConfig& c) {
  j = json{{"n_frames", c.n_frames},
           {"feature_dim", c.feature_dim},
           {"text_len", c.text_len},
           {"segments", {c.segments_min, c.segments_max}},
           {"min_seg_len", c.min_seg_len},
           {"max_seg_len", c.max_seg_len},
           {"noise_sigma", c.noise_sigma},
           {"distractor_sim", c.distractor_sim},
           {"samples", c.samples},
           {"seed", c.seed}};
}

inline void from_json(const json& j, GenConfig& c) {
  GenConfig d;
  c.n_frames = j.value("n_frames", d.n_frames);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.text_len = j.value("text_len", d.text_len);
  if (j.contains("segments")) {
    const auto& seg = j.at("segments");
    if (seg.is_number_unsigned() || seg.is_number_integer()) {
      c.segments_min = c.segments_max = seg.get<std::size_t>();
    } else if (seg.is_array() && seg.size() == 2) {
      c.segments_min = seg[0].get<std::size_t>();
      c.segments_max = seg[1].get<std::size_t>();
    } else {
      throw std::invalid_argument("GenConfig: segments must be an int or [min,max]");
    }
  }
  c.min_seg_len = j.value("min_seg_len", d.min_seg_len);
  c.max_seg_len = j.value("max_seg_len", d.max_seg_len);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.distractor_sim = j.value("distractor_sim", d.distractor_sim);
  c.samples = j.value("samples", d.samples);
  c.seed = j.value("seed", d.seed);
}

namespace detail {

inline std::vector<double> unit_normal_vec(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

inline std::vector<double> noisy_unit(const std::vector<double>& base, double sigma, Rng& rng) {
  if (sigma == 0.0) return base;
  std::vector<double> v(base.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    v[i] = base[i] + sigma * rng.normal();
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) return base;
  for (double& x : v) x /= norm;
  return v;
}

// Unit vector with exact cosine rho against the unit vector s.
inline std::vector<double> distractor_direction(const std::vector<double>& s, double rho,
                                                Rng& rng) {
  std::size_t dim = s.size();
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<double> g = unit_normal_vec(rng, dim);
    double dot = 0.0;
    for (std::size_t i = 0; i < dim; ++i) dot += g[i] * s[i];
    std::vector<double> u(dim);
    double norm = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      u[i] = g[i] - dot * s[i];
      norm += u[i] * u[i];
    }
    if (norm < 1e-12) continue;  // g parallel to s, retry
    norm = std::sqrt(norm);
    double c = std::sqrt(1.0 - rho * rho);
    std::vector<double> d(dim);
    for (std::size_t i = 0; i < dim; ++i) d[i] = rho * s[i] + c * u[i] / norm;
    return d;
  }
  throw std::runtime_error("distractor_direction: failed to find orthogonal component");
}

}  // namespace detail

inline VideoSample generate_sample(const GenConfig& cfg, Rng& rng, const std::string& id) {
  cfg.validate();
  VideoSample s;
  s.id = id;
  s.n_frames = cfg.n_frames;
  s.feature_dim = cfg.feature_dim;
  s.text_len = cfg.text_len;

  std::vector<double> sentence = detail::unit_normal_vec(rng, cfg.feature_dim);
  std::vector<double> distractor = detail::distractor_direction(sentence, cfg.distractor_sim, rng);

  std::size_t k = cfg.segments_min;
  if (cfg.segments_max > cfg.segments_min) {
    k = cfg.segments_min +
        static_cast<std::size_t>(rng.below(cfg.segments_max - cfg.segments_min + 1));
  }

  // Rejection placement of k non-overlapping spans, each covering at least
  // one frame center.
  std::vector<Span> spans;
  int attempts = 0;
  while (spans.size() < k) {
    if (++attempts > 1000) {
      throw std::runtime_error("generate_sample: could not place " + std::to_string(k) +
                               " non-overlapping segments after 1000 attempts");
    }
    double len = rng.uniform(cfg.min_seg_len, cfg.max_seg_len);
    double start = rng.uniform(0.0, 1.0 - len);
    Span cand(start, start + len);
    bool ok = true;
    for (const Span& other : spans) {
      if (cand.overlaps(other)) {
        ok = false;
        break;
      }
    }
    if (ok) {
      bool covers = false;
      for (std::size_t j = 0; j < cfg.n_frames && !covers; ++j) {
        covers = frame_inside(cand, j, cfg.n_frames);
      }
      if (covers) spans.push_back(cand);
    }
  }
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.start < b.start; });
  s.gt_spans = spans;
  s.saliency = frames_inside_any(spans, cfg.n_frames);

  s.text_features.reserve(cfg.text_len);
  for (std::size_t i = 0; i < cfg.text_len; ++i) {
    s.text_features.push_back(detail::noisy_unit(sentence, cfg.noise_sigma, rng));
  }
  s.frame_features.reserve(cfg.n_frames);
  for (std::size_t j = 0; j < cfg.n_frames; ++j) {
    const auto& base = s.saliency[j] ? sentence : distractor;
    s.frame_features.push_back(detail::noisy_unit(base, cfg.noise_sigma, rng));
  }
  return s;
}

inline json sample_to_json(const VideoSample& s) {
  json spans = json::array();
  for (const Span& sp : s.gt_spans) spans.push_back({sp.start, sp.end});
  return json{{"id", s.id},
              {"n_frames", s.n_frames},
              {"feature_dim", s.feature_dim},
              {"text_len", s.text_len},
              {"frame_features", s.frame_features},
              {"text_features", s.text_features},
              {"gt_spans", spans},
              {"saliency", s.saliency}};
}

inline VideoSample sample_from_json(const json& j) {
  VideoSample s;
  s.id = j.at("id").get<std::string>();
  s.n_frames = j.at("n_frames").get<std::size_t>();
  s.feature_dim = j.at("feature_dim").get<std::size_t>();
  s.text_len = j.at("text_len").get<std::size_t>();
  s.frame_features = j.at("frame_features").get<std::vector<std::vector<double>>>();
  s.text_features = j.at("text_features").get<std::vector<std::vector<double>>>();
  for (const auto& sp : j.at("gt_spans")) {
    if (!sp.is_array() || sp.size() != 2) {
      throw std::invalid_argument("gt_spans entries must be [start,end]");
    }
    s.gt_spans.emplace_back(sp[0].get<double>(), sp[1].get<double>());  // validates range
  }
  s.saliency = j.at("saliency").get<std::vector<int>>();

  if (s.frame_features.size() != s.n_frames || s.saliency.size() != s.n_frames ||
      s.text_features.size() != s.text_len) {
    throw std::invalid_argument("sample: array lengths do not match declared dims");
  }
  for (const auto& row : s.frame_features) {
    if (row.size() != s.feature_dim) throw std::invalid_argument("sample: bad frame feature dim");
    if (!all_finite(row)) throw std::invalid_argument("sample: non-finite frame feature");
  }
  for (const auto& row : s.text_features) {
    if (row.size() != s.feature_dim) throw std::invalid_argument("sample: bad text feature dim");
    if (!all_finite(row)) throw std::invalid_argument("sample: non-finite text feature");
  }
  if (s.gt_spans.empty()) throw std::invalid_argument("sample: at least one gt span required");
  for (int v : s.saliency) {
    if (v != 0 && v != 1) throw std::invalid_argument("sample: saliency values must be 0/1");
  }
  return s;
}

struct CorpusSummary {
  std::size_t count = 0;
  double mean_segments = 0.0;
};

inline CorpusSummary generate_corpus(const GenConfig& cfg, const std::filesystem::path& out_path) {
  cfg.validate();
  std::string buf;
  CorpusSummary summary;
  std::size_t total_segments = 0;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    std::string id = "sample-" + std::to_string(i);
    Rng rng(cfg.seed, "gen/" + id);
    VideoSample s = generate_sample(cfg, rng, id);
    buf += sample_to_json(s).dump();
    buf += '\n';
    total_segments += s.gt_spans.size();
  }
  write_file_atomic(out_path, buf);
  summary.count = cfg.samples;
  summary.mean_segments = static_cast<double>(total_segments) / static_cast<double>(cfg.samples);
  return summary;
}

inline std::vector<VideoSample> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus: " + path.string());
  std::vector<VideoSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("corpus " + path.string() + " line " + std::to_string(lineno) +
                               ": " + e.what());
    }
    try {
      out.push_back(sample_from_json(j));
    } catch (const std::exception& e) {
      throw std::runtime_error("corpus " + path.string() + " line " + std::to_string(lineno) +
                               ": " + e.what());
    }
  }
  return out;
}

}  // namespace simdetr
