#pragma once

#include <cmath>
#include <vector>

#include "hce/box.hpp"
#include "hce/rng.hpp"
#include "hce/roi_ops.hpp"
#include "hce/tensor.hpp"

namespace testutil {

inline hce::Tensor<double> rand_tensor(std::vector<int> shape, hce::Rng& rng, double lo = -1.0,
                                       double hi = 1.0) {
  hce::Tensor<double> t(std::move(shape));
  for (auto& e : t.v) e = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero, so ReLU/max kinks stay clear of the
// finite-difference step.
inline hce::Tensor<double> rand_nokink(std::vector<int> shape, hce::Rng& rng) {
  hce::Tensor<double> t(std::move(shape));
  for (auto& e : t.v) {
    double mag = 0.2 + 0.8 * rng.uniform();
    e = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

inline hce::Box rand_box(hce::Rng& rng, double img_w, double img_h, double min_side = 4.0) {
  double w = min_side + rng.uniform() * (img_w * 0.6 - min_side);
  double h = min_side + rng.uniform() * (img_h * 0.6 - min_side);
  double x1 = rng.uniform() * (img_w - w);
  double y1 = rng.uniform() * (img_h - h);
  return {x1, y1, x1 + w, y1 + h};
}

// Independent RoIAlign oracle: loops over output bins and sub-samples,
// delegating every tap to the public bilinear_sample. Re-derives the
// half-pixel-centered coordinate convention from scratch.
template <class T>
hce::Tensor<T> roi_align_oracle(const hce::Tensor<T>& map, double stride, const hce::Box& box,
                                int out = 7, int spb = 2) {
  const int d = map.dim(0);
  hce::Tensor<T> res({d, out, out});
  const double x1 = box.x1 / stride - 0.5;
  const double y1 = box.y1 / stride - 0.5;
  const double bin_w = (box.x2 - box.x1) / stride / out;
  const double bin_h = (box.y2 - box.y1) / stride / out;
  std::vector<T> tap(static_cast<std::size_t>(d));
  for (int by = 0; by < out; ++by) {
    for (int bx = 0; bx < out; ++bx) {
      for (int sy = 0; sy < spb; ++sy) {
        for (int sx = 0; sx < spb; ++sx) {
          double px = x1 + bin_w * (bx + (sx + 0.5) / spb);
          double py = y1 + bin_h * (by + (sy + 0.5) / spb);
          hce::bilinear_sample(map, px, py, tap.data());
          for (int c = 0; c < d; ++c) res.at(c, by, bx) += tap[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  for (auto& e : res.v) e /= static_cast<T>(spb * spb);
  return res;
}

// O(n^2) greedy NMS reference, written over erase-from-a-list structure
// rather than the suppression-flag loop in the library.
inline std::vector<int> nms_oracle(const std::vector<hce::Box>& boxes,
                                   const std::vector<double>& scores, double thresh) {
  std::vector<int> alive;
  for (int i = 0; i < static_cast<int>(boxes.size()); ++i) alive.push_back(i);
  std::vector<int> kept;
  while (!alive.empty()) {
    int best_pos = 0;
    for (int p = 1; p < static_cast<int>(alive.size()); ++p) {
      int a = alive[static_cast<std::size_t>(p)], b = alive[static_cast<std::size_t>(best_pos)];
      if (scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)])
        best_pos = p;
    }
    int best = alive[static_cast<std::size_t>(best_pos)];
    kept.push_back(best);
    std::vector<int> next;
    for (int a : alive)
      if (a != best &&
          hce::iou(boxes[static_cast<std::size_t>(a)], boxes[static_cast<std::size_t>(best)]) <=
              thresh)
        next.push_back(a);
    alive = std::move(next);
  }
  return kept;
}

}  // namespace testutil
