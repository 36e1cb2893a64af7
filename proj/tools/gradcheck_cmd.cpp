#include "gradcheck_cmd.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <vector>

#include "hce/gradcheck.hpp"
#include "hce/model.hpp"

namespace {

using hce::Rng;
using hce::Tensor;
using hce::ag::Tape;
using hce::ag::Var;
namespace ag = hce::ag;

Tensor<double> rand_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& e : t.v) e = rng.uniform(lo, hi);
  return t;
}

// Relu'd graphs need every pre-activation clear of zero, or a finite-difference
// probe can step across the kink. Resample until the observable output has no
// value inside the margin (post-relu values hug zero exactly when a
// pre-activation does).
template <class Forward>
void sample_clear_of_kinks(Forward&& forward, const std::function<void()>& resample,
                           double margin = 5e-3) {
  for (int attempt = 0; attempt < 500; ++attempt) {
    bool ok = true;
    for (double v : forward())
      if (std::abs(v) < margin) {
        ok = false;
        break;
      }
    if (ok) return;
    resample();
  }
  throw std::runtime_error("gradcheck: could not sample inputs clear of relu kinks");
}

hce::ModelSpec check_spec() {
  hce::ModelSpec s;
  s.widths = {4, 6, 8, 8};
  s.num_classes = 4;
  s.head_hidden = 16;
  s.use_mll = true;
  s.use_instance = true;
  s.use_global = true;
  return s;
}

struct OpCheck {
  std::string name;
  std::function<hce::FdReport(Rng&, bool)> run;  // (rng, inject_fault) -> report
};

// A deliberately wrong analytic gradient: scaled and shifted so the
// disagreement survives the error floor no matter the gradient's magnitude.
void corrupt(Tensor<double>& analytic) {
  for (auto& g : analytic.v) g = g * 1.5 + 0.01;
}

hce::FdReport check_conv3x3(Rng& rng, bool inject) {
  Tensor<double> X = rand_tensor({2, 6, 6}, rng, -0.5, 0.5);
  Tensor<double> W = rand_tensor({3, 2, 3, 3}, rng, -0.15, 0.15);
  Tensor<double> B = rand_tensor({3}, rng, -0.1, 0.1);
  auto out = [&] {
    Tape<double> t;
    return t.val(ag::conv2d(t, t.leaf(X), t.leaf(W), t.leaf(B), 1, 1)).v;
  };
  sample_clear_of_kinks(out, [&] { X = rand_tensor({2, 6, 6}, rng, -0.5, 0.5); });
  auto loss = [&] {
    Tape<double> t;
    Var y = ag::conv2d(t, t.param(&X), t.param(&W), t.param(&B), 1, 1);
    return t.val(ag::sum_all(t, ag::relu(t, y))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var wv = t.param(&W);
    Var y = ag::conv2d(t, t.param(&X), wv, t.param(&B), 1, 1);
    t.backward(ag::sum_all(t, ag::relu(t, y)));
    analytic = t.grad(wv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(W, analytic, loss);
}

hce::FdReport check_conv1x1(Rng& rng, bool inject) {
  Tensor<double> X = rand_tensor({2, 3, 5, 5}, rng, -0.5, 0.5);
  Tensor<double> W = rand_tensor({4, 3, 1, 1}, rng, -0.4, 0.4);
  Tensor<double> B = rand_tensor({4}, rng, -0.1, 0.1);
  auto out = [&] {
    Tape<double> t;
    return t.val(ag::conv2d_batch(t, t.leaf(X), t.leaf(W), t.leaf(B), 1, 0)).v;
  };
  sample_clear_of_kinks(out, [&] { X = rand_tensor({2, 3, 5, 5}, rng, -0.5, 0.5); });
  auto loss = [&] {
    Tape<double> t;
    Var y = ag::conv2d_batch(t, t.param(&X), t.param(&W), t.param(&B), 1, 0);
    return t.val(ag::sum_all(t, ag::relu(t, y))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var wv = t.param(&W);
    Var y = ag::conv2d_batch(t, t.param(&X), wv, t.param(&B), 1, 0);
    t.backward(ag::sum_all(t, ag::relu(t, y)));
    analytic = t.grad(wv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(W, analytic, loss);
}

hce::FdReport check_fc(Rng& rng, bool inject) {
  Tensor<double> X = rand_tensor({5, 8}, rng, -0.5, 0.5);
  Tensor<double> W = rand_tensor({8, 6}, rng, -0.3, 0.3);
  Tensor<double> B = rand_tensor({6}, rng, -0.1, 0.1);
  auto out = [&] {
    Tape<double> t;
    return t.val(ag::linear(t, t.leaf(X), t.leaf(W), t.leaf(B))).v;
  };
  sample_clear_of_kinks(out, [&] { X = rand_tensor({5, 8}, rng, -0.5, 0.5); });
  auto loss = [&] {
    Tape<double> t;
    Var y = ag::linear(t, t.param(&X), t.param(&W), t.param(&B));
    return t.val(ag::sum_all(t, ag::relu(t, y))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var wv = t.param(&W);
    Var y = ag::linear(t, t.param(&X), wv, t.param(&B));
    t.backward(ag::sum_all(t, ag::relu(t, y)));
    analytic = t.grad(wv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(W, analytic, loss);
}

hce::FdReport check_roi_align(Rng& rng, bool inject) {
  Tensor<double> map = rand_tensor({3, 10, 10}, rng);
  std::vector<hce::Box> boxes;
  for (int i = 0; i < 2; ++i) {
    double x1 = rng.uniform(0.0, 20.0), y1 = rng.uniform(0.0, 20.0);
    boxes.push_back({x1, y1, x1 + rng.uniform(6.0, 18.0), y1 + rng.uniform(6.0, 18.0)});
  }
  auto loss = [&] {
    Tape<double> t;
    return t.val(ag::sum_all(t, ag::roi_align_op(t, t.param(&map), 4.0, boxes))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var mv = t.param(&map);
    t.backward(ag::sum_all(t, ag::roi_align_op(t, mv, 4.0, boxes)));
    analytic = t.grad(mv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(map, analytic, loss);
}

hce::FdReport check_gap(Rng& rng, bool inject) {
  Tensor<double> X = rand_tensor({4, 5, 6}, rng);
  auto loss = [&] {
    Tape<double> t;
    return t.val(ag::sum_all(t, ag::gap_op(t, t.param(&X)))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var xv = t.param(&X);
    t.backward(ag::sum_all(t, ag::gap_op(t, xv)));
    analytic = t.grad(xv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(X, analytic, loss);
}

hce::FdReport check_gmp(Rng& rng, bool inject) {
  // The max has a kink where two cells tie; keep each channel's top two
  // values farther apart than any probe step can close.
  Tensor<double> X({4, 5, 6});
  const int hw = 30;
  for (int c = 0; c < 4; ++c) {
    for (;;) {
      double top = -1e300, second = -1e300;
      for (int i = 0; i < hw; ++i) {
        double v = rng.uniform(-1.0, 1.0);
        X.v[static_cast<std::size_t>(c * hw + i)] = v;
        if (v > top) {
          second = top;
          top = v;
        } else if (v > second) {
          second = v;
        }
      }
      if (top - second > 1e-2) break;
    }
  }
  auto loss = [&] {
    Tape<double> t;
    return t.val(ag::sum_all(t, ag::gmp_op(t, t.param(&X)))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var xv = t.param(&X);
    t.backward(ag::sum_all(t, ag::gmp_op(t, xv)));
    analytic = t.grad(xv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(X, analytic, loss);
}

hce::FdReport check_embedder(Rng& rng, bool inject) {
  auto m = hce::make_model<double>(check_spec(), 1);
  for (auto& e : m.embed_b.v) e = 2.0;  // hold pre-activations clear of the relu kink
  const int d = check_spec().d();
  Tensor<double> in = rand_tensor({1, d, 4, 4}, rng, -0.5, 0.5);
  auto loss = [&] {
    Tape<double> t;
    auto B = hce::bind(t, m);
    return t.val(ag::sum_all(t, hce::embed_image_context(t, B, t.leaf(in)))).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    auto B = hce::bind(t, m);
    t.backward(ag::sum_all(t, hce::embed_image_context(t, B, t.leaf(in))));
    analytic = t.grad(B(m.embed_w));
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(m.embed_w, analytic, loss);
}

hce::FdReport check_contextual(Rng& rng, bool inject) {
  auto m = hce::make_model<double>(check_spec(), 2);
  for (auto& e : m.ctx_b.v) e = 2.0;
  const int d = check_spec().d();
  Tensor<double> inst = rand_tensor({2, d, 7, 7}, rng, -0.3, 0.3);
  Tensor<double> glob = rand_tensor({2, d, 7, 7}, rng, -0.3, 0.3);
  auto loss = [&] {
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var y = hce::contextual_roi_feature(t, B, t.leaf(inst), t.leaf(glob));
    return t.val(ag::sum_all(t, y)).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var y = hce::contextual_roi_feature(t, B, t.leaf(inst), t.leaf(glob));
    t.backward(ag::sum_all(t, y));
    analytic = t.grad(B(m.ctx_w));
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(m.ctx_w, analytic, loss);
}

hce::FdReport check_head(Rng& rng, bool inject) {
  auto m = hce::make_model<double>(check_spec(), 3);
  for (auto& e : m.fc1_b.v) e = 0.5;  // bias the hidden relus toward the smooth side
  for (auto& e : m.fc2_b.v) e = 0.5;
  const int d = check_spec().d();
  Tensor<double> roi = rand_tensor({3, d, 7, 7}, rng, -0.2, 0.2);
  auto loss = [&] {
    Tape<double> t;
    auto B = hce::bind(t, m);
    auto out = hce::head_forward(t, B, t.leaf(roi));
    return t.val(ag::add_scalars(t, {ag::sum_all(t, out.cls), ag::sum_all(t, out.box)})).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    auto B = hce::bind(t, m);
    auto out = hce::head_forward(t, B, t.leaf(roi));
    t.backward(ag::add_scalars(t, {ag::sum_all(t, out.cls), ag::sum_all(t, out.box)}));
    analytic = t.grad(B(m.fc1_w));
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(m.fc1_w, analytic, loss);
}

hce::FdReport check_multilabel(Rng& rng, bool inject) {
  Tensor<double> Z = rand_tensor({2, 4}, rng, -2.0, 2.0);
  std::vector<std::vector<int>> ys = {{1, 0, 1, 0}, {0, 1, 0, 0}};
  auto loss = [&] {
    Tape<double> t;
    return t.val(hce::multilabel_loss(t, t.param(&Z), ys)).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var zv = t.param(&Z);
    t.backward(hce::multilabel_loss(t, zv, ys));
    analytic = t.grad(zv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(Z, analytic, loss);
}

hce::FdReport check_softmax_ce(Rng& rng, bool inject) {
  Tensor<double> Z = rand_tensor({4, 5}, rng, -2.0, 2.0);
  std::vector<int> labels = {0, 3, 2, 4};
  auto loss = [&] {
    Tape<double> t;
    return t.val(ag::softmax_ce_mean(t, t.param(&Z), labels)).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var zv = t.param(&Z);
    t.backward(ag::softmax_ce_mean(t, zv, labels));
    analytic = t.grad(zv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(Z, analytic, loss);
}

hce::FdReport check_smooth_l1(Rng& rng, bool inject) {
  const double beta = 1.0;
  Tensor<double> P = rand_tensor({5, 4}, rng, -2.0, 2.0);
  Tensor<double> T({5, 4});
  // The quadratic-to-linear crossover at |diff| == beta is only C1; keep
  // every residual away from it so the probes stay on one side.
  for (std::size_t i = 0; i < T.numel(); ++i) {
    for (;;) {
      T.v[i] = rng.uniform(-1.0, 1.0);
      if (std::abs(std::abs(P.v[i] - T.v[i]) - beta) > 1e-2) break;
    }
  }
  std::vector<double> w = {1, 0, 1, 1, 1};
  auto loss = [&] {
    Tape<double> t;
    return t.val(ag::smooth_l1(t, t.param(&P), T, w, beta, 5.0)).v[0];
  };
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var pv = t.param(&P);
    t.backward(ag::smooth_l1(t, pv, T, w, beta, 5.0));
    analytic = t.grad(pv);
  }
  if (inject) corrupt(analytic);
  return hce::fd_check(P, analytic, loss);
}

const std::vector<OpCheck>& op_checks() {
  static const std::vector<OpCheck> checks = {
      {"conv3x3", check_conv3x3},
      {"conv1x1", check_conv1x1},
      {"fc", check_fc},
      {"roi_align", check_roi_align},
      {"gap", check_gap},
      {"gmp", check_gmp},
      {"embedder", check_embedder},
      {"contextual_generator", check_contextual},
      {"head", check_head},
      {"multilabel_loss", check_multilabel},
      {"softmax_ce", check_softmax_ce},
      {"smooth_l1", check_smooth_l1},
  };
  return checks;
}

}  // namespace

std::vector<std::string> gradcheck_op_names() {
  std::vector<std::string> names;
  for (const auto& c : op_checks()) names.push_back(c.name);
  return names;
}

int run_gradcheck(std::uint64_t seed, const std::string& fault) {
  if (!fault.empty()) {
    bool known = false;
    for (const auto& c : op_checks()) known = known || c.name == fault;
    if (!known) {
      std::string all;
      for (const auto& c : op_checks()) all += (all.empty() ? "" : ", ") + c.name;
      std::fprintf(stderr, "gradcheck: unknown op '%s' (ops: %s)\n", fault.c_str(), all.c_str());
      return 2;
    }
  }
  const double tol = 1e-4;
  int failures = 0;
  for (const auto& c : op_checks()) {
    Rng rng(hce::mix_seed(seed, "gradcheck/" + c.name));
    hce::FdReport rep = c.run(rng, c.name == fault);
    const bool ok = rep.max_rel_err <= tol;
    failures += ok ? 0 : 1;
    std::printf("%-20s max rel err %.3e over %d probes  %s\n", c.name.c_str(), rep.max_rel_err,
                rep.probes, ok ? "pass" : "FAIL");
  }
  if (failures > 0) {
    std::fprintf(stderr, "gradcheck: %d of %zu ops failed\n", failures, op_checks().size());
    return 1;
  }
  std::printf("gradcheck: all %zu ops within %.0e\n", op_checks().size(), tol);
  return 0;
}
