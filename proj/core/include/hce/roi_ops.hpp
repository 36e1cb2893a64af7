#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "hce/box.hpp"
#include "hce/tensor.hpp"

namespace hce {

// Activation grid plus its spatial stride relative to the input image.
template <class T>
struct FeatureMap {
  Tensor<T> data;  // (d, h, w)
  double stride = 1.0;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// Bilinear interpolation of the four surrounding cells at feature-grid
// coordinates (x, y). Coordinates outside the grid clamp to the border, so
// this is a total function.
template <class T>
void bilinear_sample(const Tensor<T>& map, double x, double y, T* out) {
  const int d = map.dim(0), h = map.dim(1), w = map.dim(2);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const T fx = static_cast<T>(x - x0);
  const T fy = static_cast<T>(y - y0);
  const T w00 = (T(1) - fx) * (T(1) - fy);
  const T w01 = fx * (T(1) - fy);
  const T w10 = (T(1) - fx) * fy;
  const T w11 = fx * fy;
  for (int c = 0; c < d; ++c) {
    out[c] = w00 * map.at(c, y0, x0) + w01 * map.at(c, y0, x1) + w10 * map.at(c, y1, x0) +
             w11 * map.at(c, y1, x1);
  }
}

template <class T>
std::vector<T> bilinear_sample(const FeatureMap<T>& map, double x, double y) {
  std::vector<T> out(static_cast<std::size_t>(map.channels()));
  bilinear_sample(map.data, x, y, out.data());
  return out;
}

namespace detail {

// One bilinear tap: cell indices and weights after border clamping.
struct BilinearTap {
  int x0, x1, y0, y1;
  double w00, w01, w10, w11;
};

inline BilinearTap bilinear_tap(int h, int w, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  BilinearTap t;
  t.x0 = static_cast<int>(std::floor(x));
  t.y0 = static_cast<int>(std::floor(y));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  double fx = x - t.x0, fy = y - t.y0;
  t.w00 = (1.0 - fx) * (1.0 - fy);
  t.w01 = fx * (1.0 - fy);
  t.w10 = (1.0 - fx) * fy;
  t.w11 = fx * fy;
  return t;
}

// Sample coordinate for sub-sample s of bin b along one axis, in feature-grid
// coordinates. Image coordinate u maps to u / stride - 0.5 (half-pixel
// centered), so the box ends are shifted before binning.
inline double roi_sample_coord(double start, double bin_size, int bin, int s, int spb) {
  return start + bin_size * (bin + (s + 0.5) / spb);
}

}  // namespace detail

// RoIAlign onto an out x out grid. The box is given in image coordinates and
// divided by map.stride; each bin averages spb x spb bilinear samples at
// regular sub-bin centers.
template <class T>
Tensor<T> roi_align(const Tensor<T>& map, double stride, const Box& box, int out = 7,
                    int spb = 2) {
  const int d = map.dim(0), h = map.dim(1), w = map.dim(2);
  const double bw = box.w() / stride, bh = box.h() / stride;
  if (bw < 1e-6 || bh < 1e-6) throw std::invalid_argument("roi_align: degenerate box");
  const double x1 = box.x1 / stride - 0.5, y1 = box.y1 / stride - 0.5;
  const double bin_w = bw / out, bin_h = bh / out;

  Tensor<T> res({d, out, out});
  const double inv = 1.0 / (spb * spb);
  for (int by = 0; by < out; ++by) {
    for (int bx = 0; bx < out; ++bx) {
      for (int sy = 0; sy < spb; ++sy) {
        for (int sx = 0; sx < spb; ++sx) {
          double px = detail::roi_sample_coord(x1, bin_w, bx, sx, spb);
          double py = detail::roi_sample_coord(y1, bin_h, by, sy, spb);
          auto t = detail::bilinear_tap(h, w, px, py);
          for (int c = 0; c < d; ++c) {
            res.at(c, by, bx) += static_cast<T>(
                inv * (t.w00 * map.at(c, t.y0, t.x0) + t.w01 * map.at(c, t.y0, t.x1) +
                       t.w10 * map.at(c, t.y1, t.x0) + t.w11 * map.at(c, t.y1, t.x1)));
          }
        }
      }
    }
  }
  return res;
}

template <class T>
Tensor<T> roi_align(const FeatureMap<T>& map, const Box& box, int out = 7, int spb = 2) {
  return roi_align(map.data, map.stride, box, out, spb);
}

// Scatters d(out)/d(map) for one box into grad_map (same shape as map).
template <class T>
void roi_align_backward(const Tensor<T>& grad_out, double stride, const Box& box,
                        Tensor<T>& grad_map, int out = 7, int spb = 2) {
  const int h = grad_map.dim(1), w = grad_map.dim(2);
  const int d = grad_map.dim(0);
  const double bw = box.w() / stride, bh = box.h() / stride;
  const double x1 = box.x1 / stride - 0.5, y1 = box.y1 / stride - 0.5;
  const double bin_w = bw / out, bin_h = bh / out;
  const double inv = 1.0 / (spb * spb);
  for (int by = 0; by < out; ++by) {
    for (int bx = 0; bx < out; ++bx) {
      for (int sy = 0; sy < spb; ++sy) {
        for (int sx = 0; sx < spb; ++sx) {
          double px = detail::roi_sample_coord(x1, bin_w, bx, sx, spb);
          double py = detail::roi_sample_coord(y1, bin_h, by, sy, spb);
          auto t = detail::bilinear_tap(h, w, px, py);
          for (int c = 0; c < d; ++c) {
            T g = static_cast<T>(inv) * grad_out.at(c, by, bx);
            grad_map.at(c, t.y0, t.x0) += static_cast<T>(t.w00) * g;
            grad_map.at(c, t.y0, t.x1) += static_cast<T>(t.w01) * g;
            grad_map.at(c, t.y1, t.x0) += static_cast<T>(t.w10) * g;
            grad_map.at(c, t.y1, t.x1) += static_cast<T>(t.w11) * g;
          }
        }
      }
    }
  }
}

// Per-channel spatial mean.
template <class T>
std::vector<T> gap(const Tensor<T>& map) {
  const int d = map.dim(0), h = map.dim(1), w = map.dim(2);
  std::vector<T> out(static_cast<std::size_t>(d));
  const T inv = T(1) / static_cast<T>(h * w);
  for (int c = 0; c < d; ++c) {
    T s = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += map.at(c, y, x);
    out[static_cast<std::size_t>(c)] = s * inv;
  }
  return out;
}

// Per-channel spatial max. The subgradient routes to the first argmax cell in
// row-major order; argmax indices are reported for that purpose.
template <class T>
std::vector<T> gmp(const Tensor<T>& map, std::vector<int>* argmax = nullptr) {
  const int d = map.dim(0), h = map.dim(1), w = map.dim(2);
  std::vector<T> out(static_cast<std::size_t>(d));
  if (argmax) argmax->assign(static_cast<std::size_t>(d), 0);
  for (int c = 0; c < d; ++c) {
    T best = map.at(c, 0, 0);
    int best_i = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        T val = map.at(c, y, x);
        if (val > best) {
          best = val;
          best_i = y * w + x;
        }
      }
    }
    out[static_cast<std::size_t>(c)] = best;
    if (argmax) (*argmax)[static_cast<std::size_t>(c)] = best_i;
  }
  return out;
}

template <class T>
std::vector<T> gap(const FeatureMap<T>& m) {
  return gap(m.data);
}
template <class T>
std::vector<T> gmp(const FeatureMap<T>& m, std::vector<int>* argmax = nullptr) {
  return gmp(m.data, argmax);
}

}  // namespace hce
