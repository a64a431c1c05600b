// SPDX-License-Identifier: Apache-2.0
//
// Normalized temporal interval and the frame-center discretization rule
// shared by saliency labels, the bridge loss indicator, and diagnostics.
#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace simdetr {

struct Span {
  double start = 0.0;
  double end = 0.0;

  Span() = default;
  Span(double s, double e) : start(s), end(e) {
    if (!(0.0 <= s && s <= e && e <= 1.0)) {
      throw std::invalid_argument("Span: need 0 <= start <= end <= 1, got (" +
                                  std::to_string(s) + "," + std::to_string(e) + ")");
    }
  }

  double length() const { return end - start; }

  bool overlaps(const Span& o) const { return start < o.end && o.start < end; }
};

inline double frame_center(std::size_t j, std::size_t n_frames) {
  return (static_cast<double>(j) + 0.5) / static_cast<double>(n_frames);
}

// Frame j belongs to a span iff its center lies inside it (inclusive ends).
inline bool frame_inside(const Span& s, std::size_t j, std::size_t n_frames) {
  double c = frame_center(j, n_frames);
  return s.start <= c && c <= s.end;
}

inline std::vector<int> frames_inside(const Span& s, std::size_t n_frames) {
  std::vector<int> mask(n_frames, 0);
  for (std::size_t j = 0; j < n_frames; ++j) mask[j] = frame_inside(s, j, n_frames) ? 1 : 0;
  return mask;
}

inline std::vector<int> frames_inside_any(const std::vector<Span>& spans, std::size_t n_frames) {
  std::vector<int> mask(n_frames, 0);
  for (const Span& s : spans) {
    for (std::size_t j = 0; j < n_frames; ++j) {
      if (frame_inside(s, j, n_frames)) mask[j] = 1;
    }
  }
  return mask;
}

// Intersection over union of two intervals; two zero-length spans give 0.
inline double temporal_iou(const Span& a, const Span& b) {
  double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  double uni = a.length() + b.length() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace simdetr
