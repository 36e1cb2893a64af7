#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hce/ops.hpp"
#include "hce/rng.hpp"

namespace hce {

// Architecture + ablation switches. The context-embedding flags are
// cumulative: instance-level features require the image-level branch, and
// global-level features require instance-level ones.
struct ModelSpec {
  std::vector<int> widths{16, 32, 48, 64};  // stage channels; one downsample each
  int num_classes = 10;
  int head_hidden = 128;
  bool top_down = true;  // FPN top-down pathway (carries deep semantics to fine levels)
  bool use_mll = false;
  bool use_instance = false;
  bool use_global = false;
  bool ff_train = true;
  bool cf_train = false;
  bool with_rpn = false;
  int rpn_channels = 64;

  int d() const { return widths.back(); }
  int num_levels() const { return static_cast<int>(widths.size()) - 1; }
  double level_stride(int l) const { return 4.0 * static_cast<double>(1 << l); }
  int top_stride() const { return 4 << (num_levels() - 1); }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelSpec: " + m); };
    if (widths.size() < 3 || widths.size() > 6) fail("widths must list 3..6 stages");
    for (int w : widths)
      if (w < 1) fail("stage widths must be positive");
    if (num_classes < 1) fail("num_classes must be >= 1");
    if (head_hidden < 4) fail("head_hidden must be >= 4");
    if (use_instance && !use_mll)
      fail("instance-level embedding requires the image-level (mll) branch");
    if (use_global && !use_instance) fail("global-level embedding requires instance-level");
    if (cf_train && !use_instance) fail("confidence fusion requires instance-level embedding");
  }
};

template <class T>
struct Model {
  ModelSpec spec;
  // backbone stage s: 3x3 stride-2 conv (sa) then 3x3 stride-1 conv (sb)
  std::vector<Tensor<T>> sa_w, sa_b, sb_w, sb_b;
  std::vector<Tensor<T>> lat_w, lat_b;  // 1x1 laterals onto pyramid levels
  Tensor<T> embed_w, embed_b;           // 3x3 d->d context embedding
  Tensor<T> fcls_w, fcls_b;             // d->C image-level classifier
  Tensor<T> ctx_w, ctx_b;               // 1x1 2d->d contextual generator
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
  Tensor<T> cls_w, cls_b;  // head_hidden -> C+1
  Tensor<T> box_w, box_b;  // head_hidden -> 4(C+1)
  Tensor<T> rpn_w, rpn_b, rpn_ow, rpn_ob, rpn_dw, rpn_db;
};

// Enumerates the parameters of every enabled module in a fixed order. The
// order defines the optimizer-state and checkpoint layout.
template <class T, class F>
void visit_params(Model<T>& m, F&& f) {
  for (std::size_t s = 0; s < m.spec.widths.size(); ++s) {
    std::string p = "backbone.stage" + std::to_string(s);
    f(p + ".a.w", &m.sa_w[s]);
    f(p + ".a.b", &m.sa_b[s]);
    f(p + ".b.w", &m.sb_w[s]);
    f(p + ".b.b", &m.sb_b[s]);
  }
  for (int l = 0; l < m.spec.num_levels(); ++l) {
    std::string p = "fpn.lateral" + std::to_string(l);
    f(p + ".w", &m.lat_w[static_cast<std::size_t>(l)]);
    f(p + ".b", &m.lat_b[static_cast<std::size_t>(l)]);
  }
  f("head.fc1.w", &m.fc1_w);
  f("head.fc1.b", &m.fc1_b);
  f("head.fc2.w", &m.fc2_w);
  f("head.fc2.b", &m.fc2_b);
  f("head.cls.w", &m.cls_w);
  f("head.cls.b", &m.cls_b);
  f("head.box.w", &m.box_w);
  f("head.box.b", &m.box_b);
  if (m.spec.use_mll) {
    f("hce.embed.w", &m.embed_w);
    f("hce.embed.b", &m.embed_b);
    f("hce.fcls.w", &m.fcls_w);
    f("hce.fcls.b", &m.fcls_b);
  }
  if (m.spec.use_global) {
    f("hce.ctx.w", &m.ctx_w);
    f("hce.ctx.b", &m.ctx_b);
  }
  if (m.spec.with_rpn) {
    f("rpn.conv.w", &m.rpn_w);
    f("rpn.conv.b", &m.rpn_b);
    f("rpn.obj.w", &m.rpn_ow);
    f("rpn.obj.b", &m.rpn_ob);
    f("rpn.delta.w", &m.rpn_dw);
    f("rpn.delta.b", &m.rpn_db);
  }
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> param_list(Model<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  visit_params(m, [&](const std::string& n, Tensor<T>* p) { out.push_back({n, p}); });
  return out;
}

template <class T>
std::size_t param_count(Model<T>& m) {
  std::size_t n = 0;
  visit_params(m, [&](const std::string&, Tensor<T>* p) { n += p->numel(); });
  return n;
}

namespace detail {

// Each parameter draws from its own stream, so enabling or disabling one
// module never shifts another module's initial values.
template <class T>
Tensor<T> init_normal(std::vector<int> shape, double stddev, std::uint64_t seed,
                      const std::string& name) {
  Tensor<T> t(std::move(shape));
  Rng rng(mix_seed(seed, "init/" + name));
  for (auto& e : t.v) e = static_cast<T>(stddev * rng.normal());
  return t;
}

}  // namespace detail

template <class T>
Model<T> make_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> m;
  m.spec = spec;
  const int S = static_cast<int>(spec.widths.size());
  const int d = spec.d(), C = spec.num_classes, hid = spec.head_hidden;
  auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };

  int cin = 3;
  for (int s = 0; s < S; ++s) {
    int cout = spec.widths[static_cast<std::size_t>(s)];
    std::string p = "backbone.stage" + std::to_string(s);
    m.sa_w.push_back(detail::init_normal<T>({cout, cin, 3, 3}, he(cin * 9), seed, p + ".a.w"));
    m.sa_b.push_back(Tensor<T>({cout}));
    m.sb_w.push_back(detail::init_normal<T>({cout, cout, 3, 3}, he(cout * 9), seed, p + ".b.w"));
    m.sb_b.push_back(Tensor<T>({cout}));
    cin = cout;
  }
  for (int l = 0; l < spec.num_levels(); ++l) {
    int cs = spec.widths[static_cast<std::size_t>(l + 1)];
    m.lat_w.push_back(
        detail::init_normal<T>({d, cs, 1, 1}, he(cs), seed, "fpn.lateral" + std::to_string(l)));
    m.lat_b.push_back(Tensor<T>({d}));
  }
  const int flat = d * 7 * 7;
  m.fc1_w = detail::init_normal<T>({flat, hid}, he(flat), seed, "head.fc1.w");
  m.fc1_b = Tensor<T>({hid});
  m.fc2_w = detail::init_normal<T>({hid, hid}, he(hid), seed, "head.fc2.w");
  m.fc2_b = Tensor<T>({hid});
  m.cls_w = detail::init_normal<T>({hid, C + 1}, 0.01, seed, "head.cls.w");
  m.cls_b = Tensor<T>({C + 1});
  m.box_w = detail::init_normal<T>({hid, 4 * (C + 1)}, 0.001, seed, "head.box.w");
  m.box_b = Tensor<T>({4 * (C + 1)});
  if (spec.use_mll) {
    m.embed_w = detail::init_normal<T>({d, d, 3, 3}, he(d * 9), seed, "hce.embed.w");
    m.embed_b = Tensor<T>({d});
    m.fcls_w = detail::init_normal<T>({d, C}, 0.01, seed, "hce.fcls.w");
    m.fcls_b = Tensor<T>({C});
  }
  if (spec.use_global) {
    m.ctx_w = detail::init_normal<T>({d, 2 * d, 1, 1}, he(2 * d), seed, "hce.ctx.w");
    m.ctx_b = Tensor<T>({d});
  }
  if (spec.with_rpn) {
    int rc = spec.rpn_channels;
    m.rpn_w = detail::init_normal<T>({rc, d, 3, 3}, he(d * 9), seed, "rpn.conv.w");
    m.rpn_b = Tensor<T>({rc});
    m.rpn_ow = detail::init_normal<T>({1, rc, 1, 1}, 0.01, seed, "rpn.obj.w");
    m.rpn_ob = Tensor<T>({1});
    m.rpn_dw = detail::init_normal<T>({4, rc, 1, 1}, 0.001, seed, "rpn.delta.w");
    m.rpn_db = Tensor<T>({4});
  }
  return m;
}

// Registers every enabled parameter on a tape; forward builders fetch the
// Var of a parameter through operator().
template <class T>
struct Bound {
  ag::Tape<T>* t = nullptr;
  Model<T>* m = nullptr;
  std::unordered_map<const void*, ag::Var> vars;
  std::vector<std::pair<std::string, ag::Var>> ordered;  // checkpoint/optimizer order
  ag::Var operator()(const Tensor<T>& p) const { return vars.at(&p); }
};

template <class T>
Bound<T> bind(ag::Tape<T>& t, Model<T>& m) {
  Bound<T> b;
  b.t = &t;
  b.m = &m;
  visit_params(m, [&](const std::string& name, Tensor<T>* p) {
    ag::Var v = t.param(p);
    b.vars[p] = v;
    b.ordered.push_back({name, v});
  });
  return b;
}

// ---------------------------------------------------------------------------
// Forward builders. All take batched inputs (N, C, h, w).

template <class T>
struct Pyramid {
  std::vector<ag::Var> levels;  // level l has stride 4 * 2^l, d channels
  ag::Var top;                  // deepest stage output, feeds the context embedding
};

template <class T>
Pyramid<T> backbone_forward(ag::Tape<T>& t, const Bound<T>& B, ag::Var images) {
  const ModelSpec& spec = B.m->spec;
  const Tensor<T>& X = t.val(images);
  if (X.dim(1) != 3)
    throw std::invalid_argument("backbone_forward: expected 3-channel input, got " +
                                X.shape_str());
  const int H = X.dim(2), W = X.dim(3), ts = spec.top_stride();
  if (H % ts != 0 || W % ts != 0)
    throw std::invalid_argument("backbone_forward: image size " + std::to_string(W) + "x" +
                                std::to_string(H) + " is not divisible by the top stride " +
                                std::to_string(ts) + "; pad the input first");
  ag::Var h = images;
  std::vector<ag::Var> stages;
  for (std::size_t s = 0; s < spec.widths.size(); ++s) {
    h = ag::relu(t, ag::conv2d_batch(t, h, B(B.m->sa_w[s]), B(B.m->sa_b[s]), 2, 1));
    h = ag::relu(t, ag::conv2d_batch(t, h, B(B.m->sb_w[s]), B(B.m->sb_b[s]), 1, 1));
    stages.push_back(h);
  }
  Pyramid<T> p;
  p.top = h;
  for (int l = 0; l < spec.num_levels(); ++l)
    p.levels.push_back(ag::conv2d_batch(t, stages[static_cast<std::size_t>(l + 1)],
                                        B(B.m->lat_w[static_cast<std::size_t>(l)]),
                                        B(B.m->lat_b[static_cast<std::size_t>(l)]), 1, 0));
  if (spec.top_down) {
    const int n = X.dim(0);
    for (int l = spec.num_levels() - 2; l >= 0; --l) {
      std::vector<ag::Var> ups;
      for (int i = 0; i < n; ++i) {
        ag::Var u = ag::upsample2x(t, ag::slice_n(t, p.levels[static_cast<std::size_t>(l + 1)], i));
        const Tensor<T>& uv = t.val(u);
        ups.push_back(ag::reshape(t, u, {1, uv.dim(0), uv.dim(1), uv.dim(2)}));
      }
      p.levels[static_cast<std::size_t>(l)] =
          ag::add(t, p.levels[static_cast<std::size_t>(l)], ag::concat_n(t, ups));
    }
  }
  return p;
}

// X = ReLU(conv3x3(top stage)); same spatial size and stride as its input.
template <class T>
ag::Var embed_image_context(ag::Tape<T>& t, const Bound<T>& B, ag::Var top) {
  return ag::relu(t, ag::conv2d_batch(t, top, B(B.m->embed_w), B(B.m->embed_b), 1, 1));
}

// Image-level class logits: f_cls(gmp(X) + gap(X)) per image, no squashing.
template <class T>
ag::Var multilabel_logits(ag::Tape<T>& t, const Bound<T>& B, ag::Var X) {
  const int n = t.val(X).dim(0), d = t.val(X).dim(1);
  std::vector<ag::Var> pooled;
  for (int i = 0; i < n; ++i) {
    ag::Var xi = ag::slice_n(t, X, i);
    ag::Var s = ag::add(t, ag::gmp_op(t, xi), ag::gap_op(t, xi));
    pooled.push_back(ag::reshape(t, s, {1, d}));
  }
  return ag::linear(t, ag::concat_n(t, pooled), B(B.m->fcls_w), B(B.m->fcls_b));
}

// Per-image sum over classes (binary cross-entropy from logits), averaged
// over the batch.
template <class T>
ag::Var multilabel_loss(ag::Tape<T>& t, ag::Var logits, const std::vector<std::vector<int>>& ys) {
  const Tensor<T>& Z = t.val(logits);
  const int n = Z.dim(0), C = Z.dim(1);
  if (static_cast<int>(ys.size()) != n)
    throw std::invalid_argument("multilabel_loss: batch size mismatch");
  Tensor<T> targets({n, C});
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(ys[static_cast<std::size_t>(i)].size()) != C)
      throw std::invalid_argument("multilabel_loss: target length mismatch");
    for (int c = 0; c < C; ++c) {
      int y = ys[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
      if (y != 0 && y != 1)
        throw std::invalid_argument("multilabel_loss: targets must be binary");
      targets.at(i, c) = static_cast<T>(y);
    }
  }
  return ag::scale(t, ag::bce_logits_sum(t, logits, std::move(targets)), 1.0 / n);
}

// ReLU(conv1x1(concat(instance, global))) with channel order (instance, global).
template <class T>
ag::Var contextual_roi_feature(ag::Tape<T>& t, const Bound<T>& B, ag::Var x_instance,
                               ag::Var x_global) {
  return ag::relu(
      t, ag::conv2d_batch(t, ag::concat_ch(t, x_instance, x_global), B(B.m->ctx_w),
                          B(B.m->ctx_b), 1, 0));
}

template <class T>
struct HeadOut {
  ag::Var cls;  // (n, C+1)
  ag::Var box;  // (n, 4(C+1))
};

template <class T>
HeadOut<T> head_forward(ag::Tape<T>& t, const Bound<T>& B, ag::Var roi) {
  const Tensor<T>& R = t.val(roi);
  const int n = R.dim(0);
  const int flat = R.dim(1) * R.dim(2) * R.dim(3);
  ag::Var h = ag::reshape(t, roi, {n, flat});
  h = ag::relu(t, ag::linear(t, h, B(B.m->fc1_w), B(B.m->fc1_b)));
  h = ag::relu(t, ag::linear(t, h, B(B.m->fc2_w), B(B.m->fc2_b)));
  return {ag::linear(t, h, B(B.m->cls_w), B(B.m->cls_b)),
          ag::linear(t, h, B(B.m->box_w), B(B.m->box_b))};
}

// Classification logits of the two branches added before soft-max; both
// passes go through the one shared head parameter set.
template <class T>
ag::Var confidence_fusion(ag::Tape<T>& t, const Bound<T>& B, ag::Var x_context, ag::Var x_fpn) {
  return ag::add(t, head_forward(t, B, x_context).cls, head_forward(t, B, x_fpn).cls);
}

// ---------------------------------------------------------------------------
// Per-proposal feature assembly

// Standard FPN rule: a box lands on the level whose stride is nearest (in
// log2) to sqrt(area)/7, i.e. the level it samples at native resolution.
inline int fpn_level_for_box(const Box& b, int num_levels) {
  double target = std::log2(std::max(std::sqrt(b.area()) / 7.0, 1e-6));
  int best = 0;
  double best_d = 1e300;
  for (int l = 0; l < num_levels; ++l) {
    double d = std::abs(std::log2(4.0 * (1 << l)) - target);
    if (d < best_d) {
      best_d = d;
      best = l;
    }
  }
  return best;
}

template <class T>
ag::Var fpn_roi_features(ag::Tape<T>& t, const ModelSpec& spec, const Pyramid<T>& p,
                         int image_index, const std::vector<Box>& boxes) {
  const int L = spec.num_levels();
  const int n = static_cast<int>(boxes.size());
  if (n == 0) throw std::invalid_argument("fpn_roi_features: no boxes");
  std::vector<std::vector<int>> by_level(static_cast<std::size_t>(L));
  for (int i = 0; i < n; ++i)
    by_level[static_cast<std::size_t>(fpn_level_for_box(boxes[static_cast<std::size_t>(i)], L))]
        .push_back(i);
  std::vector<ag::Var> chunks;
  std::vector<int> order;
  for (int l = 0; l < L; ++l) {
    const auto& idx = by_level[static_cast<std::size_t>(l)];
    if (idx.empty()) continue;
    std::vector<Box> sub;
    for (int i : idx) sub.push_back(boxes[static_cast<std::size_t>(i)]);
    ag::Var slice = ag::slice_n(t, p.levels[static_cast<std::size_t>(l)], image_index);
    chunks.push_back(ag::roi_align_op(t, slice, spec.level_stride(l), std::move(sub)));
    order.insert(order.end(), idx.begin(), idx.end());
  }
  ag::Var cat = ag::concat_n(t, chunks);
  std::vector<int> inv(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) inv[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k;
  return ag::gather_n(t, cat, std::move(inv));
}

// One image's RoI features for every branch the configuration enables.
template <class T>
struct RoiBundle {
  ag::Var x_fpn;
  ag::Var x_context;  // meaningful only when has_context
  ag::Var x_global;   // (1,d,7,7) whole-image feature, set when use_global
  ag::Var x_main;     // head input of the main branch (fusion or plain FPN)
  bool has_context = false;
  bool fused = false;
};

// X must be the context-embedded map when spec.use_instance is set; use_ff
// selects whether the main branch sees the fused feature.
template <class T>
RoiBundle<T> build_roi_bundle(ag::Tape<T>& t, const Bound<T>& B, const Pyramid<T>& p, ag::Var X,
                              int image_index, const std::vector<Box>& boxes, double img_w,
                              double img_h, bool use_ff) {
  const ModelSpec& spec = B.m->spec;
  RoiBundle<T> r;
  r.x_fpn = fpn_roi_features(t, spec, p, image_index, boxes);
  r.x_main = r.x_fpn;
  if (!spec.use_instance) return r;
  const double ts = spec.top_stride();
  ag::Var Xi = ag::slice_n(t, X, image_index);
  ag::Var x_inst = ag::roi_align_op(t, Xi, ts, boxes);
  if (spec.use_global) {
    // computed once per image, broadcast to every proposal
    r.x_global = ag::roi_align_op(t, Xi, ts, {Box{0.0, 0.0, img_w, img_h}});
    ag::Var x_glob = ag::repeat_n(t, r.x_global, static_cast<int>(boxes.size()));
    r.x_context = contextual_roi_feature(t, B, x_inst, x_glob);
  } else {
    r.x_context = x_inst;
  }
  r.has_context = true;
  if (use_ff) {
    r.x_main = ag::add(t, r.x_context, r.x_fpn);  // elementwise feature fusion
    r.fused = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Loss bookkeeping

struct LossBundle {
  double feat = 0, conf = 0, mll = 0, rpn = 0, total = 0;
};

inline LossBundle total_loss(double feat, double conf, double mll, double rpn) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("total_loss: non-finite term ") + name);
  };
  check(feat, "L_feat");
  check(conf, "L_conf");
  check(mll, "L_mll");
  check(rpn, "L_rpn");
  return {feat, conf, mll, rpn, feat + conf + mll + rpn};
}

}  // namespace hce
