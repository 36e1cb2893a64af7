#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "hce/rng.hpp"
#include "hce/tensor.hpp"

namespace hce {

// Central finite differences against an analytic gradient, in 64-bit.
// loss_fn() must recompute the scalar loss from the current parameter values.
// Large tensors are probed on a deterministic random subset of elements.
// Per-element error is |a - n| / max(|a|, |n|, floor); the floor keeps
// noise on near-zero gradients from dominating while leaving real
// disagreements (which are on the order of the gradient itself) visible.
struct FdReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  int probes = 0;
};

inline FdReport fd_check(Tensor<double>& param, const Tensor<double>& analytic,
                         const std::function<double()>& loss_fn, double h = 1e-4,
                         int max_probes = 256, double floor = 1e-2,
                         std::uint64_t probe_seed = 17) {
  FdReport rep;
  std::vector<std::size_t> idx(param.numel());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (static_cast<int>(idx.size()) > max_probes) {
    Rng rng(probe_seed, "fd_probe");
    for (int i = 0; i < max_probes; ++i) {
      std::size_t j = i + rng.uniform_int(static_cast<std::uint64_t>(idx.size() - i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(max_probes));
  }
  for (std::size_t e : idx) {
    const double saved = param.v[e];
    param.v[e] = saved + h;
    const double lp = loss_fn();
    param.v[e] = saved - h;
    const double lm = loss_fn();
    param.v[e] = saved;
    const double numeric = (lp - lm) / (2.0 * h);
    const double a = analytic.v[e];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_index = e;
    }
    ++rep.probes;
  }
  return rep;
}

}  // namespace hce
