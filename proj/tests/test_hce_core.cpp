#include <doctest.h>

#include <cmath>
#include <vector>

#include "common.hpp"
#include "hce/gradcheck.hpp"
#include "hce/model.hpp"

using hce::ag::Tape;
using hce::ag::Var;

namespace {

hce::ModelSpec small_spec(bool mll, bool inst, bool glob) {
  hce::ModelSpec s;
  s.widths = {4, 6, 8, 8};
  s.num_classes = 4;
  s.head_hidden = 16;
  s.use_mll = mll;
  s.use_instance = inst;
  s.use_global = glob;
  return s;
}

template <class T>
void fill(hce::Tensor<T>& t, T v) {
  for (auto& e : t.v) e = v;
}

}  // namespace

TEST_CASE("model initialization is deterministic and module-local") {
  auto spec = small_spec(true, true, true);
  auto a = hce::make_model<float>(spec, 7);
  auto b = hce::make_model<float>(spec, 7);
  auto pa = hce::param_list(a), pb = hce::param_list(b);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second->v == pb[i].second->v);
  }

  // enabling the context modules must not shift the baseline modules' draws
  auto base = hce::make_model<float>(small_spec(false, false, false), 7);
  for (auto& [name, p] : hce::param_list(base)) {
    const hce::Tensor<float>* q = nullptr;
    for (auto& [n2, p2] : pa)
      if (n2 == name) q = p2;
    REQUIRE_MESSAGE(q != nullptr, name);
    CHECK(p->v == q->v);
  }

  // parameter-count deltas match the added modules analytically
  const int d = spec.d(), C = spec.num_classes;
  auto count = [](hce::Model<float>& m) { return hce::param_count(m); };
  auto m_mll = hce::make_model<float>(small_spec(true, false, false), 7);
  auto m_inst = hce::make_model<float>(small_spec(true, true, false), 7);
  auto m_full = hce::make_model<float>(small_spec(true, true, true), 7);
  CHECK(count(m_mll) - count(base) ==
        static_cast<std::size_t>(d * d * 9 + d + d * C + C));  // embed conv + f_cls
  CHECK(count(m_inst) == count(m_mll));                        // instance level reuses X
  CHECK(count(m_full) - count(m_inst) ==
        static_cast<std::size_t>(2 * d * d + d));  // conv1x1 generator

  CHECK_THROWS(hce::make_model<float>(small_spec(false, true, false), 7));
  CHECK_THROWS(hce::make_model<float>(small_spec(true, false, true), 7));
}

TEST_CASE("context embedding is the relu of a 3x3 convolution") {
  auto spec = small_spec(true, true, true);
  auto m = hce::make_model<double>(spec, 1);
  const int d = spec.d();
  hce::Rng rng(11, "embed");

  SUBCASE("zero parameters give a zero map") {
    fill(m.embed_w, 0.0);
    fill(m.embed_b, 0.0);
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var top = t.leaf(testutil::rand_tensor({2, d, 4, 4}, rng));
    Var X = hce::embed_image_context(t, B, top);
    for (double v : t.val(X).v) CHECK(v == 0.0);
  }

  SUBCASE("identity kernel on nonnegative input is a passthrough") {
    fill(m.embed_w, 0.0);
    fill(m.embed_b, 0.0);
    for (int c = 0; c < d; ++c) m.embed_w.at(c, c, 1, 1) = 1.0;
    Tape<double> t;
    auto B = hce::bind(t, m);
    hce::Tensor<double> in = testutil::rand_tensor({1, d, 5, 5}, rng, 0.0, 1.0);
    Var X = hce::embed_image_context(t, B, t.leaf(in));
    for (std::size_t i = 0; i < in.numel(); ++i)
      CHECK(t.val(X).v[i] == doctest::Approx(in.v[i]).epsilon(1e-12));
  }

  SUBCASE("gradient of sum(X) wrt conv weights matches finite differences") {
    fill(m.embed_b, 2.0);  // keep every pre-activation clear of the relu kink
    hce::Tensor<double> in = testutil::rand_tensor({1, d, 4, 4}, rng);
    hce::Tensor<double> analytic;
    auto loss = [&]() {
      Tape<double> t;
      auto B = hce::bind(t, m);
      Var X = hce::embed_image_context(t, B, t.leaf(in));
      Var l = hce::ag::sum_all(t, X);
      return t.val(l).v[0];
    };
    {
      Tape<double> t;
      auto B = hce::bind(t, m);
      Var X = hce::embed_image_context(t, B, t.leaf(in));
      t.backward(hce::ag::sum_all(t, X));
      analytic = t.grad(B(m.embed_w));
    }
    auto rep = hce::fd_check(m.embed_w, analytic, loss);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("multilabel logits are f_cls of max-pool plus average-pool") {
  auto spec = small_spec(true, false, false);
  auto m = hce::make_model<double>(spec, 3);
  const int d = spec.d(), C = spec.num_classes;
  hce::Rng rng(5, "mll");

  SUBCASE("zero weights leave only the bias") {
    fill(m.fcls_w, 0.0);
    for (int c = 0; c < C; ++c) m.fcls_b.v[static_cast<std::size_t>(c)] = 0.25 * (c + 1);
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var X = t.leaf(testutil::rand_tensor({3, d, 4, 4}, rng));
    const hce::Tensor<double>& Z = t.val(hce::multilabel_logits(t, B, X));
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < C; ++c) CHECK(Z.at(i, c) == doctest::Approx(0.25 * (c + 1)));
  }

  SUBCASE("constant map pools to twice the constant") {
    hce::Tensor<double> X({1, d, 3, 3});
    fill(X, 0.7);
    Tape<double> t;
    auto B = hce::bind(t, m);
    const hce::Tensor<double>& Z = t.val(hce::multilabel_logits(t, B, t.leaf(X)));
    for (int c = 0; c < C; ++c) {
      double want = m.fcls_b.v[static_cast<std::size_t>(c)];
      for (int k = 0; k < d; ++k) want += 1.4 * m.fcls_w.at(k, c);
      CHECK(Z.at(0, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  SUBCASE("random map matches an explicit pooling reference") {
    hce::Tensor<double> X = testutil::rand_tensor({2, d, 5, 6}, rng);
    Tape<double> t;
    auto B = hce::bind(t, m);
    const hce::Tensor<double>& Z = t.val(hce::multilabel_logits(t, B, t.leaf(X)));
    for (int i = 0; i < 2; ++i) {
      std::vector<double> pooled(static_cast<std::size_t>(d));
      for (int k = 0; k < d; ++k) {
        double mx = -1e300, sum = 0.0;
        for (int y = 0; y < 5; ++y)
          for (int x = 0; x < 6; ++x) {
            double v = X.at(i, k, y, x);
            mx = std::max(mx, v);
            sum += v;
          }
        pooled[static_cast<std::size_t>(k)] = mx + sum / 30.0;
      }
      for (int c = 0; c < C; ++c) {
        double want = m.fcls_b.v[static_cast<std::size_t>(c)];
        for (int k = 0; k < d; ++k) want += pooled[static_cast<std::size_t>(k)] * m.fcls_w.at(k, c);
        CHECK(std::abs(Z.at(i, c) - want) <= 1e-6);
      }
    }
  }
}

TEST_CASE("multilabel loss closed forms, batching, and validation") {
  auto spec = small_spec(true, false, false);
  spec.num_classes = 10;
  auto m = hce::make_model<double>(spec, 3);

  SUBCASE("zero logits cost C ln 2 regardless of targets") {
    Tape<double> t;
    hce::Tensor<double> z({1, 10});
    Var logits = t.leaf(z);
    std::vector<std::vector<int>> ys{{1, 0, 1, 0, 0, 1, 0, 0, 0, 1}};
    Var l = hce::multilabel_loss(t, logits, ys);
    CHECK(std::abs(t.val(l).v[0] - 10.0 * std::log(2.0)) <= 1e-9);
  }

  SUBCASE("single-class closed form at logit ln 3") {
    Tape<double> t;
    hce::Tensor<double> z({1, 1});
    z.v[0] = std::log(3.0);
    Var l = hce::multilabel_loss(t, t.leaf(z), {{1}});
    CHECK(t.val(l).v[0] == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  }

  SUBCASE("loss is the batch mean of per-image class sums") {
    hce::Rng rng(9, "bce");
    hce::Tensor<double> z1 = testutil::rand_tensor({1, 10}, rng, -3.0, 3.0);
    hce::Tensor<double> z2({2, 10});
    std::copy_n(z1.data(), 10, z2.data());
    std::copy_n(z1.data(), 10, z2.data() + 10);
    std::vector<int> y{1, 1, 0, 0, 1, 0, 1, 0, 0, 0};
    Tape<double> t;
    Var a = hce::multilabel_loss(t, t.leaf(z1), {y});
    Var b = hce::multilabel_loss(t, t.leaf(z2), {y, y});
    CHECK(t.val(a).v[0] == doctest::Approx(t.val(b).v[0]).epsilon(1e-12));
  }

  SUBCASE("non-binary or mis-sized targets are rejected") {
    Tape<double> t;
    hce::Tensor<double> z({1, 10});
    Var logits = t.leaf(z);
    CHECK_THROWS(hce::multilabel_loss(t, logits, {{2, 0, 0, 0, 0, 0, 0, 0, 0, 0}}));
    CHECK_THROWS(hce::multilabel_loss(t, logits, {{1, 0}}));
    CHECK_THROWS(hce::multilabel_loss(t, logits, {}));
  }

  SUBCASE("gradient wrt logits matches finite differences") {
    hce::Rng rng(21, "bcefd");
    hce::Tensor<double> z = testutil::rand_tensor({2, 10}, rng, -2.0, 2.0);
    std::vector<std::vector<int>> ys{{1, 0, 0, 1, 0, 0, 1, 1, 0, 0},
                                     {0, 1, 1, 0, 0, 0, 0, 0, 1, 0}};
    hce::Tensor<double> analytic;
    auto loss = [&]() {
      Tape<double> t;
      Var lv = t.param(&z);
      return t.val(hce::multilabel_loss(t, lv, ys)).v[0];
    };
    {
      Tape<double> t;
      Var lv = t.param(&z);
      Var l = hce::multilabel_loss(t, lv, ys);
      t.backward(l);
      analytic = t.grad(lv);
    }
    auto rep = hce::fd_check(z, analytic, loss);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("contextual generator: zeros, range, and gradients") {
  auto spec = small_spec(true, true, true);
  auto m = hce::make_model<double>(spec, 13);
  const int d = spec.d();
  hce::Rng rng(31, "ctx");

  SUBCASE("zero parameters give zero context") {
    fill(m.ctx_w, 0.0);
    fill(m.ctx_b, 0.0);
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var inst = t.leaf(testutil::rand_tensor({3, d, 7, 7}, rng));
    Var glob = t.leaf(testutil::rand_tensor({3, d, 7, 7}, rng));
    for (double v : t.val(hce::contextual_roi_feature(t, B, inst, glob)).v) CHECK(v == 0.0);
  }

  SUBCASE("output is nonnegative") {
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var inst = t.leaf(testutil::rand_tensor({2, d, 7, 7}, rng));
    Var glob = t.leaf(testutil::rand_tensor({2, d, 7, 7}, rng));
    for (double v : t.val(hce::contextual_roi_feature(t, B, inst, glob)).v) CHECK(v >= 0.0);
  }

  SUBCASE("channel order is instance first, global second") {
    fill(m.ctx_w, 0.0);
    fill(m.ctx_b, 0.0);
    m.ctx_w.at(0, 0, 0, 0) = 1.0;      // channel 0 reads instance channel 0
    m.ctx_w.at(1, d, 0, 0) = 1.0;      // channel 1 reads global channel 0
    Tape<double> t;
    auto B = hce::bind(t, m);
    hce::Tensor<double> iv({1, d, 7, 7}), gv({1, d, 7, 7});
    fill(iv, 0.25);
    fill(gv, 0.75);
    const auto& out = t.val(hce::contextual_roi_feature(t, B, t.leaf(iv), t.leaf(gv)));
    CHECK(out.at(0, 0, 3, 3) == doctest::Approx(0.25));
    CHECK(out.at(0, 1, 3, 3) == doctest::Approx(0.75));
  }

  SUBCASE("gradient wrt conv1x1 weights matches finite differences") {
    fill(m.ctx_b, 2.0);
    hce::Tensor<double> iv = testutil::rand_tensor({2, d, 7, 7}, rng);
    hce::Tensor<double> gv = testutil::rand_tensor({2, d, 7, 7}, rng);
    hce::Tensor<double> analytic;
    auto loss = [&]() {
      Tape<double> t;
      auto B = hce::bind(t, m);
      Var y = hce::contextual_roi_feature(t, B, t.leaf(iv), t.leaf(gv));
      return t.val(hce::ag::sum_all(t, y)).v[0];
    };
    {
      Tape<double> t;
      auto B = hce::bind(t, m);
      Var y = hce::contextual_roi_feature(t, B, t.leaf(iv), t.leaf(gv));
      t.backward(hce::ag::sum_all(t, y));
      analytic = t.grad(B(m.ctx_w));
    }
    auto rep = hce::fd_check(m.ctx_w, analytic, loss);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("confidence fusion rides one shared head") {
  auto spec = small_spec(true, true, true);
  auto m = hce::make_model<double>(spec, 17);
  const int d = spec.d(), C = spec.num_classes;
  hce::Rng rng(41, "cf");

  int head_params = 0;
  for (auto& [name, p] : hce::param_list(m)) {
    (void)p;
    if (name.rfind("head.", 0) == 0) ++head_params;
  }
  CHECK(head_params == 8);  // fc1, fc2, cls, box — one set, weight and bias each

  SUBCASE("equal inputs double the logits") {
    Tape<double> t;
    auto B = hce::bind(t, m);
    hce::Tensor<double> x = testutil::rand_tensor({3, d, 7, 7}, rng);
    Var xv = t.leaf(x);
    const auto& fused = t.val(hce::confidence_fusion(t, B, xv, xv));
    const auto& single = t.val(hce::head_forward(t, B, xv).cls);
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c <= C; ++c)
        CHECK(fused.at(i, c) == doctest::Approx(2.0 * single.at(i, c)).epsilon(1e-12));
  }

  SUBCASE("zero head weights leave twice the classifier bias") {
    fill(m.fc1_w, 0.0);
    fill(m.fc1_b, 0.0);
    fill(m.fc2_w, 0.0);
    fill(m.fc2_b, 0.0);
    fill(m.cls_w, 0.0);
    for (int c = 0; c <= C; ++c) m.cls_b.v[static_cast<std::size_t>(c)] = 0.1 * (c + 1);
    Tape<double> t;
    auto B = hce::bind(t, m);
    Var a = t.leaf(testutil::rand_tensor({2, d, 7, 7}, rng));
    Var b = t.leaf(testutil::rand_tensor({2, d, 7, 7}, rng));
    const auto& fused = t.val(hce::confidence_fusion(t, B, a, b));
    for (int i = 0; i < 2; ++i)
      for (int c = 0; c <= C; ++c)
        CHECK(fused.at(i, c) == doctest::Approx(0.2 * (c + 1)).epsilon(1e-12));
  }

  SUBCASE("mutating the head moves both branches identically") {
    hce::Tensor<double> xa = testutil::rand_tensor({1, d, 7, 7}, rng);
    hce::Tensor<double> xb = testutil::rand_tensor({1, d, 7, 7}, rng);
    auto eval_both = [&]() {
      Tape<double> t;
      auto B = hce::bind(t, m);
      auto ca = t.val(hce::head_forward(t, B, t.leaf(xa)).cls);
      auto cb = t.val(hce::head_forward(t, B, t.leaf(xb)).cls);
      return std::pair{ca, cb};
    };
    auto before = eval_both();
    m.cls_b.v[0] += 1.5;
    auto after = eval_both();
    for (int c = 0; c <= C; ++c) {
      double da = after.first.at(0, c) - before.first.at(0, c);
      double db = after.second.at(0, c) - before.second.at(0, c);
      CHECK(da == doctest::Approx(db).epsilon(1e-12));
      CHECK(da == doctest::Approx(c == 0 ? 1.5 : 0.0));
    }
  }

  SUBCASE("gradient flows into both inputs") {
    fill(m.fc1_b, 0.5);
    fill(m.fc2_b, 0.5);
    hce::Tensor<double> xa = testutil::rand_tensor({1, d, 7, 7}, rng);
    hce::Tensor<double> xb = testutil::rand_tensor({1, d, 7, 7}, rng);
    for (hce::Tensor<double>* input : {&xa, &xb}) {
      hce::Tensor<double> analytic;
      auto loss = [&]() {
        Tape<double> t;
        auto B = hce::bind(t, m);
        Var y = hce::confidence_fusion(t, B, t.param(&xa), t.param(&xb));
        return t.val(hce::ag::sum_all(t, y)).v[0];
      };
      {
        Tape<double> t;
        auto B = hce::bind(t, m);
        Var va = t.param(&xa), vb = t.param(&xb);
        Var y = hce::confidence_fusion(t, B, va, vb);
        t.backward(hce::ag::sum_all(t, y));
        analytic = t.grad(input == &xa ? va : vb);
      }
      auto rep = hce::fd_check(*input, analytic, loss);
      CHECK(rep.max_rel_err <= 1e-4);
    }
  }
}

TEST_CASE("roi bundles: fusion identities, degeneration, global invariance") {
  auto spec = small_spec(true, true, true);
  auto m = hce::make_model<double>(spec, 23);
  const int d = spec.d();
  hce::Rng rng(51, "bundle");
  hce::Tensor<float> img({3, 64, 64});
  for (auto& e : img.v) e = static_cast<float>(rng.uniform());

  auto forward = [&](hce::Model<double>& model, const std::vector<hce::Box>& boxes,
                     bool use_ff) {
    auto t = std::make_shared<Tape<double>>();
    auto B = hce::bind(*t, model);
    hce::Tensor<double> in({1, 3, 64, 64});
    for (std::size_t i = 0; i < img.numel(); ++i) in.v[i] = img.v[i] - 0.5;
    auto pyr = hce::backbone_forward(*t, B, t->leaf(std::move(in)));
    Var X = hce::embed_image_context(*t, B, pyr.top);
    auto rb = hce::build_roi_bundle(*t, B, pyr, X, 0, boxes, 64.0, 64.0, use_ff);
    return std::pair{t, rb};
  };

  std::vector<hce::Box> boxes{{4, 6, 30, 28}, {20, 30, 58, 60}, {10, 40, 26, 56}};

  SUBCASE("feature fusion is the elementwise sum") {
    auto [t, rb] = forward(m, boxes, true);
    REQUIRE(rb.fused);
    const auto& fp = t->val(rb.x_fpn);
    const auto& cx = t->val(rb.x_context);
    const auto& mn = t->val(rb.x_main);
    REQUIRE(fp.shape == cx.shape);
    for (std::size_t i = 0; i < mn.numel(); ++i) CHECK(mn.v[i] == fp.v[i] + cx.v[i]);
  }

  SUBCASE("zeroed context parameters reduce fusion to the plain fpn feature") {
    fill(m.embed_w, 0.0);
    fill(m.embed_b, 0.0);
    fill(m.ctx_w, 0.0);
    fill(m.ctx_b, 0.0);
    auto [t, rb] = forward(m, boxes, true);
    const auto& cx = t->val(rb.x_context);
    for (double v : cx.v) CHECK(v == 0.0);
    const auto& fp = t->val(rb.x_fpn);
    const auto& mn = t->val(rb.x_main);
    for (std::size_t i = 0; i < mn.numel(); ++i) CHECK(mn.v[i] == fp.v[i]);
  }

  SUBCASE("global feature ignores the proposal list entirely") {
    auto [t1, rb1] = forward(m, boxes, true);
    std::vector<hce::Box> others{{40, 2, 62, 20}};
    auto [t2, rb2] = forward(m, others, true);
    const auto& g1 = t1->val(rb1.x_global);
    const auto& g2 = t2->val(rb2.x_global);
    REQUIRE(g1.shape == g2.shape);
    CHECK(g1.v == g2.v);  // exact: same image, same full-image box

    // and it matches the sample-loop oracle on the embedded map
    Tape<double>& t = *t1;
    (void)t;
    hce::Tensor<double> X_img({d, 4, 4});
    // recompute X for the oracle from the first tape's stored value
    // (slice image 0 of the (1,d,4,4) map)
    // the bundle's X input is not exposed, so rebuild it:
    auto t3 = std::make_shared<Tape<double>>();
    auto B3 = hce::bind(*t3, m);
    hce::Tensor<double> in({1, 3, 64, 64});
    for (std::size_t i = 0; i < img.numel(); ++i) in.v[i] = img.v[i] - 0.5;
    auto pyr3 = hce::backbone_forward(*t3, B3, t3->leaf(std::move(in)));
    const auto& Xv = t3->val(hce::embed_image_context(*t3, B3, pyr3.top));
    REQUIRE(Xv.dim(2) == 4);
    for (int c = 0; c < d; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) X_img.at(c, y, x) = Xv.at(0, c, y, x);
    auto oracle = testutil::roi_align_oracle(X_img, 16.0, hce::Box{0, 0, 64, 64});
    for (std::size_t i = 0; i < oracle.numel(); ++i)
      CHECK(std::abs(g1.v[i] - oracle.v[i]) <= 1e-6);
  }

  SUBCASE("instance-only configuration passes the instance feature through") {
    auto mi = hce::make_model<double>(small_spec(true, true, false), 23);
    auto [t, rb] = forward(mi, boxes, true);
    REQUIRE(rb.has_context);
    // x_context must equal roi_align of the embedded map at stride 16
    auto t2 = std::make_shared<Tape<double>>();
    auto B2 = hce::bind(*t2, mi);
    hce::Tensor<double> in({1, 3, 64, 64});
    for (std::size_t i = 0; i < img.numel(); ++i) in.v[i] = img.v[i] - 0.5;
    auto pyr2 = hce::backbone_forward(*t2, B2, t2->leaf(std::move(in)));
    Var X2 = hce::embed_image_context(*t2, B2, pyr2.top);
    Var inst = hce::ag::roi_align_op(*t2, hce::ag::slice_n(*t2, X2, 0), 16.0, boxes);
    CHECK(t->val(rb.x_context).v == t2->val(inst).v);
  }

  SUBCASE("baseline bundles carry no context branch") {
    auto mb = hce::make_model<double>(small_spec(false, false, false), 23);
    auto t = std::make_shared<Tape<double>>();
    auto B = hce::bind(*t, mb);
    hce::Tensor<double> in({1, 3, 64, 64});
    for (std::size_t i = 0; i < img.numel(); ++i) in.v[i] = img.v[i] - 0.5;
    auto pyr = hce::backbone_forward(*t, B, t->leaf(std::move(in)));
    auto rb = hce::build_roi_bundle(*t, B, pyr, Var{}, 0, boxes, 64.0, 64.0, true);
    CHECK(!rb.has_context);
    CHECK(!rb.fused);
    CHECK(t->val(rb.x_main).v == t->val(rb.x_fpn).v);
  }
}

TEST_CASE("total loss is the plain sum and names non-finite terms") {
  auto lb = hce::total_loss(1.0, 2.0, 3.0, 4.0);
  CHECK(lb.total == 10.0);
  CHECK(lb.feat == 1.0);
  CHECK(lb.conf == 2.0);
  CHECK(lb.mll == 3.0);
  CHECK(lb.rpn == 4.0);
  CHECK(hce::total_loss(0, 0, 0, 0).total == 0.0);
  CHECK(hce::total_loss(4.0, 3.0, 2.0, 1.0).total == lb.total);  // permutation-invariant

  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(hce::total_loss(nan, 0, 0, 0), doctest::Contains("L_feat"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(hce::total_loss(0, nan, 0, 0), doctest::Contains("L_conf"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(hce::total_loss(0, 0, inf, 0), doctest::Contains("L_mll"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(hce::total_loss(0, 0, 0, -inf), doctest::Contains("L_rpn"),
                       std::runtime_error);
}

TEST_CASE("fpn level assignment follows the log2 scale rule") {
  const int L = 3;  // strides 4, 8, 16
  auto level_of = [&](double side) {
    return hce::fpn_level_for_box(hce::Box{0, 0, side, side}, L);
  };
  CHECK(level_of(7 * 4) == 0);    // native scale of stride 4
  CHECK(level_of(7 * 8) == 1);
  CHECK(level_of(7 * 16) == 2);
  CHECK(level_of(7 * 64) == 2);   // clamped to the top
  CHECK(level_of(2) == 0);        // clamped to the bottom
  CHECK(level_of(7 * 5.657) == 1);  // geometric midpoint rounds to the nearer level
}
