#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "hce/autograd.hpp"
#include "hce/box.hpp"
#include "hce/roi_ops.hpp"

namespace hce::ag {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------------------
// im2col / col2im

template <class T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho, int wo,
            Tensor<T>& col) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  col = Tensor<T>({cin * kh * kw, ho * wo});
  T* dst = col.data();
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at(c, iy, ix) : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_acc(const Tensor<T>& col, int kh, int kw, int stride, int pad, int ho, int wo,
                Tensor<T>& dx) {
  const int cin = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  const T* src = col.data();
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) dx.at(c, iy, ix) += *src;
            ++src;
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution, x: (Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout)

template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, Var b, int stride = 1, int pad = 0) {
  const Tensor<T>& X = t.val(x);
  const Tensor<T>& W = t.val(w);
  const int cin = X.dim(0), h = X.dim(1), wd = X.dim(2);
  const int cout = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  if (W.dim(1) != cin)
    throw std::invalid_argument("conv2d: channel mismatch, input " + X.shape_str() +
                                " vs weight " + W.shape_str());
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int k = cin * kh * kw, m = ho * wo;

  auto col = std::make_shared<Tensor<T>>();
  im2col(X, kh, kw, stride, pad, ho, wo, *col);

  Tensor<T> y({cout, ho, wo});
  {
    CMapRM<T> Wm(W.data(), cout, k);
    CMapRM<T> Cm(col->data(), k, m);
    MapRM<T> Ym(y.data(), cout, m);
    Ym.noalias() = Wm * Cm;
    CMapRM<T> Bm(t.val(b).data(), cout, 1);
    Ym.colwise() += Bm.col(0);
  }

  return t.node(std::move(y), {x, w, b},
                [=](Tape<T>& tp, int self) {
                  const Tensor<T>& gy = tp.grad(Var{self});
                  CMapRM<T> Gy(gy.data(), cout, m);
                  if (Tensor<T>* gw = tp.grad_if_needed(w)) {
                    MapRM<T> Gw(gw->data(), cout, k);
                    CMapRM<T> Cm(col->data(), k, m);
                    Gw.noalias() += Gy * Cm.transpose();
                  }
                  if (Tensor<T>* gb = tp.grad_if_needed(b)) {
                    MapRM<T> Gb(gb->data(), cout, 1);
                    Gb.col(0) += Gy.rowwise().sum();
                  }
                  if (Tensor<T>* gx = tp.grad_if_needed(x)) {
                    Tensor<T> dcol({k, m});
                    MapRM<T> Dc(dcol.data(), k, m);
                    CMapRM<T> Wm(tp.val(w).data(), cout, k);
                    Dc.noalias() = Wm.transpose() * Gy;
                    col2im_acc(dcol, kh, kw, stride, pad, ho, wo, *gx);
                  }
                });
}

// Convolution over a batch of small maps, x: (N, Cin, h, w). Used for the
// per-RoI 1x1 convolution; kernels > 1 fall back to per-sample im2col.
template <class T>
Var conv2d_batch(Tape<T>& t, Var x, Var w, Var b, int stride = 1, int pad = 0) {
  const Tensor<T>& X = t.val(x);
  const Tensor<T>& W = t.val(w);
  const int n = X.dim(0), cin = X.dim(1), h = X.dim(2), wd = X.dim(3);
  const int cout = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  if (W.dim(1) != cin)
    throw std::invalid_argument("conv2d_batch: channel mismatch, input " + X.shape_str() +
                                " vs weight " + W.shape_str());
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int k = cin * kh * kw, m = ho * wo;
  const bool plain = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

  auto cols = std::make_shared<std::vector<Tensor<T>>>();
  Tensor<T> y({n, cout, ho, wo});
  const std::size_t in_sz = static_cast<std::size_t>(cin) * h * wd;
  const std::size_t out_sz = static_cast<std::size_t>(cout) * ho * wo;
  for (int i = 0; i < n; ++i) {
    CMapRM<T> Wm(W.data(), cout, k);
    MapRM<T> Ym(y.data() + i * out_sz, cout, m);
    if (plain) {
      CMapRM<T> Xm(X.data() + i * in_sz, cin, m);
      Ym.noalias() = Wm * Xm;
    } else {
      Tensor<T> xi;
      xi.shape = {cin, h, wd};
      xi.v.assign(X.data() + i * in_sz, X.data() + (i + 1) * in_sz);
      cols->emplace_back();
      im2col(xi, kh, kw, stride, pad, ho, wo, cols->back());
      CMapRM<T> Cm(cols->back().data(), k, m);
      Ym.noalias() = Wm * Cm;
    }
    CMapRM<T> Bm(t.val(b).data(), cout, 1);
    Ym.colwise() += Bm.col(0);
  }

  return t.node(
      std::move(y), {x, w, b}, [=](Tape<T>& tp, int self) {
        const Tensor<T>& gy = tp.grad(Var{self});
        const Tensor<T>& Xv = tp.val(x);
        Tensor<T>* gw = tp.grad_if_needed(w);
        Tensor<T>* gb = tp.grad_if_needed(b);
        Tensor<T>* gx = tp.grad_if_needed(x);
        for (int i = 0; i < n; ++i) {
          CMapRM<T> Gy(gy.data() + i * out_sz, cout, m);
          if (gw) {
            MapRM<T> Gw(gw->data(), cout, k);
            if (plain) {
              CMapRM<T> Xm(Xv.data() + i * in_sz, cin, m);
              Gw.noalias() += Gy * Xm.transpose();
            } else {
              CMapRM<T> Cm((*cols)[static_cast<std::size_t>(i)].data(), k, m);
              Gw.noalias() += Gy * Cm.transpose();
            }
          }
          if (gb) {
            MapRM<T> Gb(gb->data(), cout, 1);
            Gb.col(0) += Gy.rowwise().sum();
          }
          if (gx) {
            CMapRM<T> Wm(tp.val(w).data(), cout, k);
            if (plain) {
              MapRM<T> Gx(gx->data() + i * in_sz, cin, m);
              Gx.noalias() += Wm.transpose() * Gy;
            } else {
              Tensor<T> dcol({k, m});
              MapRM<T> Dc(dcol.data(), k, m);
              Dc.noalias() = Wm.transpose() * Gy;
              Tensor<T> dxi({cin, h, wd});
              col2im_acc(dcol, kh, kw, stride, pad, ho, wo, dxi);
              T* dst = gx->data() + i * in_sz;
              for (std::size_t j = 0; j < in_sz; ++j) dst[j] += dxi.v[j];
            }
          }
        }
      });
}

// Affine map, x: (N, D), w: (D, M), b: (M)

template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
  const Tensor<T>& X = t.val(x);
  const Tensor<T>& W = t.val(w);
  const int n = X.dim(0), d = X.dim(1), m = W.dim(1);
  if (W.dim(0) != d)
    throw std::invalid_argument("linear: shape mismatch, input " + X.shape_str() +
                                " vs weight " + W.shape_str());
  Tensor<T> y({n, m});
  {
    CMapRM<T> Xm(X.data(), n, d);
    CMapRM<T> Wm(W.data(), d, m);
    MapRM<T> Ym(y.data(), n, m);
    Ym.noalias() = Xm * Wm;
    CMapRM<T> Bm(t.val(b).data(), 1, m);
    Ym.rowwise() += Bm.row(0);
  }
  return t.node(std::move(y), {x, w, b},
                [=](Tape<T>& tp, int self) {
                  const Tensor<T>& gy = tp.grad(Var{self});
                  CMapRM<T> Gy(gy.data(), n, m);
                  if (Tensor<T>* gw = tp.grad_if_needed(w)) {
                    MapRM<T> Gw(gw->data(), d, m);
                    CMapRM<T> Xm(tp.val(x).data(), n, d);
                    Gw.noalias() += Xm.transpose() * Gy;
                  }
                  if (Tensor<T>* gb = tp.grad_if_needed(b)) {
                    MapRM<T> Gb(gb->data(), 1, m);
                    Gb.row(0) += Gy.colwise().sum();
                  }
                  if (Tensor<T>* gx = tp.grad_if_needed(x)) {
                    MapRM<T> Gx(gx->data(), n, d);
                    CMapRM<T> Wm(tp.val(w).data(), d, m);
                    Gx.noalias() += Gy * Wm.transpose();
                  }
                });
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

template <class T>
Var relu(Tape<T>& t, Var x) {
  Tensor<T> y = t.val(x);
  for (auto& e : y.v) e = e > T(0) ? e : T(0);
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      const Tensor<T>& xv = tp.val(x);
      for (std::size_t i = 0; i < gx->numel(); ++i)
        if (xv.v[i] > T(0)) gx->v[i] += gy.v[i];
    }
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& A = t.val(a);
  const Tensor<T>& B = t.val(b);
  if (!A.same_shape(B))
    throw std::invalid_argument("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  Tensor<T> y = A;
  for (std::size_t i = 0; i < y.numel(); ++i) y.v[i] += B.v[i];
  return t.node(std::move(y), {a, b}, [=](Tape<T>& tp, int self) {
    const Tensor<T>& gy = tp.grad(Var{self});
    for (Var p : {a, b})
      if (Tensor<T>* gp = tp.grad_if_needed(p))
        for (std::size_t i = 0; i < gp->numel(); ++i) gp->v[i] += gy.v[i];
  });
}

template <class T>
Var scale(Tape<T>& t, Var x, double s) {
  Tensor<T> y = t.val(x);
  for (auto& e : y.v) e *= static_cast<T>(s);
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      for (std::size_t i = 0; i < gx->numel(); ++i) gx->v[i] += static_cast<T>(s) * gy.v[i];
    }
  });
}

template <class T>
Var reshape(Tape<T>& t, Var x, std::vector<int> shape) {
  Tensor<T> y = t.val(x).reshaped(std::move(shape));
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      for (std::size_t i = 0; i < gx->numel(); ++i) gx->v[i] += gy.v[i];
    }
  });
}

template <class T>
Var sum_all(Tape<T>& t, Var x) {
  T s = 0;
  for (const auto& e : t.val(x).v) s += e;
  Tensor<T> y({1});
  y.v[0] = s;
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      T g = tp.grad(Var{self}).v[0];
      for (auto& e : gx->v) e += g;
    }
  });
}

template <class T>
Var add_scalars(Tape<T>& t, const std::vector<Var>& xs) {
  T s = 0;
  for (Var v : xs) s += t.val(v).v[0];
  Tensor<T> y({1});
  y.v[0] = s;
  std::vector<Var> parents = xs;
  return t.node(std::move(y), parents, [xs](Tape<T>& tp, int self) {
    T g = tp.grad(Var{self}).v[0];
    for (Var v : xs)
      if (Tensor<T>* gp = tp.grad_if_needed(v)) gp->v[0] += g;
  });
}

// Channel concatenation of RoI batches: (N,Ca,h,w) + (N,Cb,h,w).
template <class T>
Var concat_ch(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& A = t.val(a);
  const Tensor<T>& B = t.val(b);
  const int n = A.dim(0), ca = A.dim(1), cb = B.dim(1), h = A.dim(2), w = A.dim(3);
  if (B.dim(0) != n || B.dim(2) != h || B.dim(3) != w)
    throw std::invalid_argument("concat_ch: shape mismatch " + A.shape_str() + " vs " +
                                B.shape_str());
  Tensor<T> y({n, ca + cb, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    std::copy_n(A.data() + i * ca * plane, ca * plane, y.data() + i * (ca + cb) * plane);
    std::copy_n(B.data() + i * cb * plane, cb * plane,
                y.data() + i * (ca + cb) * plane + ca * plane);
  }
  return t.node(std::move(y), {a, b}, [=](Tape<T>& tp, int self) {
    const Tensor<T>& gy = tp.grad(Var{self});
    for (int i = 0; i < n; ++i) {
      if (Tensor<T>* ga = tp.grad_if_needed(a)) {
        const T* src = gy.data() + i * (ca + cb) * plane;
        T* dst = ga->data() + i * ca * plane;
        for (std::size_t j = 0; j < ca * plane; ++j) dst[j] += src[j];
      }
      if (Tensor<T>* gb = tp.grad_if_needed(b)) {
        const T* src = gy.data() + i * (ca + cb) * plane + ca * plane;
        T* dst = gb->data() + i * cb * plane;
        for (std::size_t j = 0; j < cb * plane; ++j) dst[j] += src[j];
      }
    }
  });
}

// Concatenate RoI batches along N.
template <class T>
Var concat_n(Tape<T>& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_n: empty input");
  std::vector<int> shape = t.val(xs[0]).shape;
  int total = 0;
  for (Var v : xs) total += t.val(v).dim(0);
  shape[0] = total;
  Tensor<T> y(shape);
  std::size_t off = 0;
  for (Var v : xs) {
    const Tensor<T>& X = t.val(v);
    std::copy_n(X.data(), X.numel(), y.data() + off);
    off += X.numel();
  }
  std::vector<Var> parents = xs;
  return t.node(std::move(y), parents, [xs](Tape<T>& tp, int self) {
    const Tensor<T>& gy = tp.grad(Var{self});
    std::size_t off2 = 0;
    for (Var v : xs) {
      std::size_t sz = tp.val(v).numel();
      if (Tensor<T>* gp = tp.grad_if_needed(v)) {
        for (std::size_t j = 0; j < sz; ++j) gp->v[j] += gy.v[off2 + j];
      }
      off2 += sz;
    }
  });
}

// Slice one batch element: (N, rest...) -> (rest...).
template <class T>
Var slice_n(Tape<T>& t, Var x, int i) {
  const Tensor<T>& X = t.val(x);
  const std::size_t sz = X.numel() / static_cast<std::size_t>(X.dim(0));
  std::vector<int> shape(X.shape.begin() + 1, X.shape.end());
  Tensor<T> y(shape);
  std::copy_n(X.data() + static_cast<std::size_t>(i) * sz, sz, y.data());
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      T* dst = gx->data() + static_cast<std::size_t>(i) * sz;
      for (std::size_t j = 0; j < sz; ++j) dst[j] += gy.v[j];
    }
  });
}

// Reorder batch elements: (N, rest...) with M indices -> (M, rest...).
template <class T>
Var gather_n(Tape<T>& t, Var x, std::vector<int> idx) {
  const Tensor<T>& X = t.val(x);
  const std::size_t sz = X.numel() / static_cast<std::size_t>(X.dim(0));
  std::vector<int> shape = X.shape;
  shape[0] = static_cast<int>(idx.size());
  Tensor<T> y(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(X.data() + static_cast<std::size_t>(idx[i]) * sz, sz, y.data() + i * sz);
  return t.node(std::move(y), {x},
                [=, idx = std::move(idx)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gx = tp.grad_if_needed(x)) {
                    const Tensor<T>& gy = tp.grad(Var{self});
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      T* dst = gx->data() + static_cast<std::size_t>(idx[i]) * sz;
                      const T* src = gy.data() + i * sz;
                      for (std::size_t j = 0; j < sz; ++j) dst[j] += src[j];
                    }
                  }
                });
}

// Broadcast a (1,C,h,w) tensor to (N,C,h,w).
template <class T>
Var repeat_n(Tape<T>& t, Var x, int n) {
  const Tensor<T>& X = t.val(x);
  const std::size_t sz = X.numel();
  Tensor<T> y({n, X.dim(1), X.dim(2), X.dim(3)});
  for (int i = 0; i < n; ++i) std::copy_n(X.data(), sz, y.data() + i * sz);
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < sz; ++j) gx->v[j] += gy.v[i * sz + j];
    }
  });
}

// Nearest-neighbor 2x upsampling of (C,h,w).
template <class T>
Var upsample2x(Tape<T>& t, Var x) {
  const Tensor<T>& X = t.val(x);
  const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
  Tensor<T> y({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) y.at(ch, yy, xx) = X.at(ch, yy / 2, xx / 2);
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      for (int ch = 0; ch < c; ++ch)
        for (int yy = 0; yy < 2 * h; ++yy)
          for (int xx = 0; xx < 2 * w; ++xx) gx->at(ch, yy / 2, xx / 2) += gy.at(ch, yy, xx);
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling

template <class T>
Var gap_op(Tape<T>& t, Var x) {
  const Tensor<T>& X = t.val(x);
  const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
  std::vector<T> pooled = gap(X);
  Tensor<T> y({c});
  y.v = std::move(pooled);
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      const T inv = T(1) / static_cast<T>(h * w);
      for (int ch = 0; ch < c; ++ch) {
        T g = gy.v[static_cast<std::size_t>(ch)] * inv;
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx) gx->at(ch, yy, xx) += g;
      }
    }
  });
}

template <class T>
Var gmp_op(Tape<T>& t, Var x) {
  const Tensor<T>& X = t.val(x);
  const int c = X.dim(0), w = X.dim(2);
  auto argmax = std::make_shared<std::vector<int>>();
  std::vector<T> pooled = gmp(X, argmax.get());
  Tensor<T> y({c});
  y.v = std::move(pooled);
  return t.node(std::move(y), {x}, [=](Tape<T>& tp, int self) {
    if (Tensor<T>* gx = tp.grad_if_needed(x)) {
      const Tensor<T>& gy = tp.grad(Var{self});
      for (int ch = 0; ch < c; ++ch) {
        int idx = (*argmax)[static_cast<std::size_t>(ch)];
        gx->at(ch, idx / w, idx % w) += gy.v[static_cast<std::size_t>(ch)];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// RoIAlign over a list of boxes: (C,H,W) -> (N,C,out,out)

template <class T>
Var roi_align_op(Tape<T>& t, Var x, double stride, std::vector<Box> boxes, int out = 7,
                 int spb = 2) {
  const Tensor<T>& X = t.val(x);
  const int c = X.dim(0);
  const int n = static_cast<int>(boxes.size());
  Tensor<T> y({n, c, out, out});
  const std::size_t sz = static_cast<std::size_t>(c) * out * out;
  for (int i = 0; i < n; ++i) {
    Tensor<T> r = roi_align(X, stride, boxes[static_cast<std::size_t>(i)], out, spb);
    std::copy_n(r.data(), sz, y.data() + i * sz);
  }
  return t.node(std::move(y), {x},
                [=, boxes = std::move(boxes)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gx = tp.grad_if_needed(x)) {
                    const Tensor<T>& gy = tp.grad(Var{self});
                    Tensor<T> gslice({c, out, out});
                    for (int i = 0; i < n; ++i) {
                      std::copy_n(gy.data() + i * sz, sz, gslice.data());
                      roi_align_backward(gslice, stride, boxes[static_cast<std::size_t>(i)],
                                         *gx, out, spb);
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Losses

// Mean softmax cross-entropy over rows; logits (N,K), integer labels.
template <class T>
Var softmax_ce_mean(Tape<T>& t, Var logits, std::vector<int> labels) {
  const Tensor<T>& Z = t.val(logits);
  const int n = Z.dim(0), k = Z.dim(1);
  auto probs = std::make_shared<Tensor<T>>(std::vector<int>{n, k});
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    T mx = Z.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, Z.at(i, j));
    T denom = 0;
    for (int j = 0; j < k; ++j) denom += std::exp(Z.at(i, j) - mx);
    T log_denom = std::log(denom);
    for (int j = 0; j < k; ++j) probs->at(i, j) = std::exp(Z.at(i, j) - mx) / denom;
    int lab = labels[static_cast<std::size_t>(i)];
    loss -= (Z.at(i, lab) - mx - log_denom);
  }
  loss /= static_cast<T>(n);
  Tensor<T> y({1});
  y.v[0] = loss;
  return t.node(std::move(y), {logits},
                [=, labels = std::move(labels)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gz = tp.grad_if_needed(logits)) {
                    T g = tp.grad(Var{self}).v[0] / static_cast<T>(n);
                    for (int i = 0; i < n; ++i) {
                      for (int j = 0; j < k; ++j) gz->at(i, j) += g * probs->at(i, j);
                      gz->at(i, labels[static_cast<std::size_t>(i)]) -= g;
                    }
                  }
                });
}

// Binary cross-entropy from logits, summed over all elements. Stable form:
// max(z,0) - z*y + log1p(exp(-|z|)).
template <class T>
Var bce_logits_sum(Tape<T>& t, Var logits, Tensor<T> targets) {
  const Tensor<T>& Z = t.val(logits);
  if (!Z.same_shape(targets))
    throw std::invalid_argument("bce_logits_sum: shape mismatch " + Z.shape_str() + " vs " +
                                targets.shape_str());
  T loss = 0;
  for (std::size_t i = 0; i < Z.numel(); ++i) {
    T z = Z.v[i], y = targets.v[i];
    loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> out({1});
  out.v[0] = loss;
  return t.node(std::move(out), {logits},
                [=, targets = std::move(targets)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gz = tp.grad_if_needed(logits)) {
                    T g = tp.grad(Var{self}).v[0];
                    const Tensor<T>& Zv = tp.val(logits);
                    for (std::size_t i = 0; i < gz->numel(); ++i) {
                      T z = Zv.v[i];
                      T sig = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                        : std::exp(z) / (T(1) + std::exp(z));
                      gz->v[i] += g * (sig - targets.v[i]);
                    }
                  }
                });
}

// Smooth-L1 (Huber) with per-row weights and a fixed normalizer:
//   L = (1/norm) * sum_i w_i * sum_j f(pred_ij - tgt_ij)
template <class T>
Var smooth_l1(Tape<T>& t, Var pred, Tensor<T> target, std::vector<T> row_weight, double beta,
              double norm) {
  const Tensor<T>& P = t.val(pred);
  const int n = P.dim(0), k = P.dim(1);
  const T b = static_cast<T>(beta);
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    T w = row_weight[static_cast<std::size_t>(i)];
    if (w == T(0)) continue;
    for (int j = 0; j < k; ++j) {
      T d = P.at(i, j) - target.at(i, j);
      T a = std::abs(d);
      loss += w * (a < b ? T(0.5) * d * d / b : a - T(0.5) * b);
    }
  }
  loss /= static_cast<T>(norm);
  Tensor<T> out({1});
  out.v[0] = loss;
  return t.node(std::move(out), {pred},
                [=, target = std::move(target), row_weight = std::move(row_weight)](
                    Tape<T>& tp, int self) {
                  if (Tensor<T>* gp = tp.grad_if_needed(pred)) {
                    T g = tp.grad(Var{self}).v[0] / static_cast<T>(norm);
                    const Tensor<T>& Pv = tp.val(pred);
                    for (int i = 0; i < n; ++i) {
                      T w = row_weight[static_cast<std::size_t>(i)];
                      if (w == T(0)) continue;
                      for (int j = 0; j < k; ++j) {
                        T d = Pv.at(i, j) - target.at(i, j);
                        T dd = std::abs(d) < b ? d / b : (d > T(0) ? T(1) : T(-1));
                        gp->at(i, j) += g * w * dd;
                      }
                    }
                  }
                });
}

// Select the 4-delta block of each row's target class: (N,4K) -> (N,4).
template <class T>
Var select_deltas(Tape<T>& t, Var deltas, std::vector<int> labels) {
  const Tensor<T>& D = t.val(deltas);
  const int n = D.dim(0);
  Tensor<T> y({n, 4});
  for (int i = 0; i < n; ++i) {
    int base = 4 * labels[static_cast<std::size_t>(i)];
    for (int j = 0; j < 4; ++j) y.at(i, j) = D.at(i, base + j);
  }
  return t.node(std::move(y), {deltas},
                [=, labels = std::move(labels)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gd = tp.grad_if_needed(deltas)) {
                    const Tensor<T>& gy = tp.grad(Var{self});
                    for (int i = 0; i < n; ++i) {
                      int base = 4 * labels[static_cast<std::size_t>(i)];
                      for (int j = 0; j < 4; ++j) gd->at(i, base + j) += gy.at(i, j);
                    }
                  }
                });
}

// Gather scalars from a flattened tensor: used for sampled-anchor selection.
template <class T>
Var gather(Tape<T>& t, Var x, std::vector<int> indices) {
  const Tensor<T>& X = t.val(x);
  const int m = static_cast<int>(indices.size());
  Tensor<T> y({m});
  for (int i = 0; i < m; ++i) y.v[static_cast<std::size_t>(i)] =
      X.v[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
  return t.node(std::move(y), {x},
                [=, indices = std::move(indices)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gx = tp.grad_if_needed(x)) {
                    const Tensor<T>& gy = tp.grad(Var{self});
                    for (int i = 0; i < m; ++i)
                      gx->v[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])] +=
                          gy.v[static_cast<std::size_t>(i)];
                  }
                });
}

// Gather rows from (N,K): (M,K) output.
template <class T>
Var gather_rows(Tape<T>& t, Var x, std::vector<int> rows) {
  const Tensor<T>& X = t.val(x);
  const int k = X.dim(1), m = static_cast<int>(rows.size());
  Tensor<T> y({m, k});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) y.at(i, j) = X.at(rows[static_cast<std::size_t>(i)], j);
  return t.node(std::move(y), {x},
                [=, rows = std::move(rows)](Tape<T>& tp, int self) {
                  if (Tensor<T>* gx = tp.grad_if_needed(x)) {
                    const Tensor<T>& gy = tp.grad(Var{self});
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < k; ++j)
                        gx->at(rows[static_cast<std::size_t>(i)], j) += gy.at(i, j);
                  }
                });
}

}  // namespace hce::ag
