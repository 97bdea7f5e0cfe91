#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mhformer/pose.hpp"

namespace mhf {

/// Pixel coordinates → [−1, 1]: x' = 2x/w − 1, y' = 2y/w − h/w.
/// Sequences without image_size are taken as already normalized.
inline PoseSequence normalize_screen(const PoseSequence& seq2d) {
  if (seq2d.dims != 2) throw ValidationError("normalize_screen needs a 2D sequence");
  PoseSequence out = seq2d;
  if (!seq2d.image_size) return out;
  const double w = (*seq2d.image_size)[0], h = (*seq2d.image_size)[1];
  if (!(w > 0 && h > 0)) throw ValidationError("image_size must be positive");
  for (std::size_t i = 0; i < out.coords.size(); i += 2) {
    out.coords[i] = out.coords[i] / w * 2.0 - 1.0;
    out.coords[i + 1] = out.coords[i + 1] / w * 2.0 - h / w;
  }
  out.image_size.reset();
  return out;
}

/// Camera-frame millimetres → root-relative metres (the regression target).
inline PoseSequence root_relative_m(const PoseSequence& seq3d) {
  if (seq3d.dims != 3) throw ValidationError("root_relative_m needs a 3D sequence");
  PoseSequence out = seq3d;
  for (std::size_t f = 0; f < out.frames; ++f)
    for (std::size_t j = 0; j < out.joints; ++j)
      for (int k = 0; k < 3; ++k) out.at(f, j, k) = (seq3d.at(f, j, k) - seq3d.at(f, 0, k)) * 1e-3;
  return out;
}

/// Sliding windows of N frames, centred on frames 0, stride, 2·stride, …
/// Frames beyond either end replicate the edge frame.
struct WindowSet {
  std::size_t N = 1, J = 0;
  std::vector<double> x;  // count × N × J × 2
  std::vector<double> y;  // count × N × J × 3, empty without targets
  std::vector<std::size_t> centers;

  std::size_t size() const { return centers.size(); }
  bool has_targets() const { return !y.empty(); }
  const double* x_window(std::size_t i) const { return x.data() + i * N * J * 2; }
  const double* y_window(std::size_t i) const { return y.data() + i * N * J * 3; }
  // Centre frame of window i in the target, J × 3.
  const double* y_center(std::size_t i) const { return y_window(i) + (N / 2) * J * 3; }

  WindowSet subset(const std::vector<std::size_t>& idx) const {
    WindowSet s;
    s.N = N;
    s.J = J;
    for (std::size_t i : idx) {
      s.x.insert(s.x.end(), x_window(i), x_window(i) + N * J * 2);
      if (has_targets()) s.y.insert(s.y.end(), y_window(i), y_window(i) + N * J * 3);
      s.centers.push_back(centers.at(i));
    }
    return s;
  }
};

inline WindowSet make_windows(const PoseSequence& seq2d, const PoseSequence* seq3d, std::size_t N,
                              std::size_t stride = 1) {
  if (N % 2 == 0) throw ValidationError("window length N must be odd, got " + std::to_string(N));
  if (stride < 1) throw ValidationError("window stride must be >= 1");
  if (seq2d.dims != 2) throw ValidationError("windows: input must be 2D");
  if (seq3d) {
    if (seq3d->dims != 3) throw ValidationError("windows: target must be 3D");
    if (seq3d->frames != seq2d.frames || seq3d->joints != seq2d.joints)
      throw ValidationError("windows: 2D and 3D sequences differ in frames or joints");
  }
  const std::size_t F = seq2d.frames, J = seq2d.joints;
  const long half = long(N / 2);
  WindowSet w;
  w.N = N;
  w.J = J;
  for (std::size_t c = 0; c < F; c += stride) {
    for (long o = -half; o <= half; ++o) {
      const std::size_t f = std::size_t(std::clamp(long(c) + o, 0L, long(F) - 1));
      w.x.insert(w.x.end(), seq2d.frame(f), seq2d.frame(f) + J * 2);
      if (seq3d) w.y.insert(w.y.end(), seq3d->frame(f), seq3d->frame(f) + J * 3);
    }
    w.centers.push_back(c);
  }
  return w;
}

}  // namespace mhf
