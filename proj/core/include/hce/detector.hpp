#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hce/box.hpp"
#include "hce/model.hpp"
#include "hce/ops.hpp"
#include "hce/rng.hpp"
#include "hce/synth_data.hpp"

namespace hce {

// ---------------------------------------------------------------------------
// Proposals

struct ProposalConfig {
  std::string source = "gt_jitter";  // {gt_jitter, rpn_lite}
  double jitter_frac = 0.2;          // uniform perturbation, fraction of box size
  int jitter_per_gt = 8;
  int negatives_per_image = 24;
  int max_proposals = 300;
  double negative_min_side = 6.0;
  // rpn_lite
  double anchor_scale = 4.0;  // anchor side = scale * level stride
  int rpn_pre_nms = 600;
  int rpn_post_nms = 300;
  double rpn_nms_iou = 0.7;

  void validate() const {
    if (source != "gt_jitter" && source != "rpn_lite")
      throw std::invalid_argument("ProposalConfig: unknown source '" + source + "'");
    if (jitter_frac < 0.0 || jitter_frac > 0.5)
      throw std::invalid_argument("ProposalConfig: jitter_frac must lie in [0, 0.5]");
    if (jitter_per_gt < 1) throw std::invalid_argument("ProposalConfig: jitter_per_gt >= 1");
    if (negatives_per_image < 0 || max_proposals < 1)
      throw std::invalid_argument("ProposalConfig: bad proposal counts");
  }
};

struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> objectness;
  std::string source;
};

// Ground-truth boxes each jittered jitter_per_gt times (center shifted by up
// to +-frac of the size, size rescaled by 1 +- frac), plus uniformly random
// negatives. Zero noise reproduces the ground truth exactly. Empty ground
// truth yields negatives only.
inline ProposalSet propose_gt_jitter(const std::vector<Box>& gt, double img_w, double img_h,
                                     const ProposalConfig& pc, Rng& rng) {
  ProposalSet out;
  out.source = "gt_jitter";
  auto push = [&](const Box& b) {
    Box c = b.clipped(img_w, img_h);
    if (c.valid() && static_cast<int>(out.boxes.size()) < pc.max_proposals) {
      out.boxes.push_back(c);
      out.objectness.push_back(1.0);
    }
  };
  for (const Box& g : gt) {
    for (int j = 0; j < pc.jitter_per_gt; ++j) {
      double dx = rng.uniform(-1.0, 1.0) * pc.jitter_frac * g.w();
      double dy = rng.uniform(-1.0, 1.0) * pc.jitter_frac * g.h();
      double sw = 1.0 + rng.uniform(-1.0, 1.0) * pc.jitter_frac;
      double sh = 1.0 + rng.uniform(-1.0, 1.0) * pc.jitter_frac;
      double w = std::max(g.w() * sw, 2.0), h = std::max(g.h() * sh, 2.0);
      double cx = g.cx() + dx, cy = g.cy() + dy;
      push({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
    }
  }
  double max_side = 0.5 * std::min(img_w, img_h);
  for (int j = 0; j < pc.negatives_per_image; ++j) {
    double w = rng.uniform(pc.negative_min_side, max_side);
    double h = rng.uniform(pc.negative_min_side, max_side);
    double cx = rng.uniform(0.0, img_w), cy = rng.uniform(0.0, img_h);
    push({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Target assignment (Fast R-CNN convention)

struct RoiTargets {
  std::vector<int> labels;      // class in [0,C) or C for background
  std::vector<int> matched_gt;  // index into gt, -1 for background
  std::vector<double> max_iou;
};

// IoU >= 0.5 against the best ground-truth box makes a proposal foreground
// with that box's class; ties go to the earlier ground-truth entry.
inline RoiTargets label_proposals(const std::vector<Box>& proposals, const std::vector<Box>& gt,
                                  const std::vector<int>& gt_category, int num_classes) {
  if (gt.size() != gt_category.size())
    throw std::invalid_argument("label_proposals: gt/category size mismatch");
  for (int c : gt_category)
    if (c < 0 || c >= num_classes)
      throw std::invalid_argument("label_proposals: category out of range");
  RoiTargets t;
  for (const Box& p : proposals) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      double v = iou(p, gt[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    t.max_iou.push_back(best_iou);
    if (best >= 0 && best_iou >= 0.5) {
      t.labels.push_back(gt_category[static_cast<std::size_t>(best)]);
      t.matched_gt.push_back(best);
    } else {
      t.labels.push_back(num_classes);
      t.matched_gt.push_back(-1);
    }
  }
  return t;
}

// Samples up to max_rois proposals at a 1:3 fg:bg ratio (foreground capped at
// fg_cap). Returned indices are ascending within each group, foreground first.
inline std::vector<int> sample_rois(const RoiTargets& t, int max_rois, int fg_cap, Rng& rng) {
  std::vector<int> fg, bg;
  for (std::size_t i = 0; i < t.labels.size(); ++i)
    (t.matched_gt[i] >= 0 ? fg : bg).push_back(static_cast<int>(i));
  auto subsample = [&](std::vector<int>& v, int keep) {
    if (static_cast<int>(v.size()) <= keep) return;
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(
                              static_cast<std::int64_t>(v.size() - i)));
      std::swap(v[i], v[j]);
    }
    v.resize(static_cast<std::size_t>(keep));
    std::sort(v.begin(), v.end());
  };
  subsample(fg, fg_cap);
  subsample(bg, max_rois - static_cast<int>(fg.size()));
  std::vector<int> out = fg;
  out.insert(out.end(), bg.begin(), bg.end());
  return out;
}

// ---------------------------------------------------------------------------
// RPN-lite: one square anchor per pyramid cell, objectness + deltas

template <class T>
struct RpnOut {
  std::vector<ag::Var> obj;     // per level (N,1,h,w)
  std::vector<ag::Var> deltas;  // per level (N,4,h,w)
};

template <class T>
RpnOut<T> rpn_forward(ag::Tape<T>& t, const Bound<T>& B, const Pyramid<T>& p) {
  RpnOut<T> r;
  for (ag::Var lvl : p.levels) {
    ag::Var h = ag::relu(t, ag::conv2d_batch(t, lvl, B(B.m->rpn_w), B(B.m->rpn_b), 1, 1));
    r.obj.push_back(ag::conv2d_batch(t, h, B(B.m->rpn_ow), B(B.m->rpn_ob), 1, 0));
    r.deltas.push_back(ag::conv2d_batch(t, h, B(B.m->rpn_dw), B(B.m->rpn_db), 1, 0));
  }
  return r;
}

inline Box anchor_at(int level, int iy, int ix, double scale) {
  double stride = 4.0 * (1 << level);
  double cx = (ix + 0.5) * stride, cy = (iy + 0.5) * stride, half = 0.5 * scale * stride;
  return {cx - half, cy - half, cx + half, cy + half};
}

// Decodes one image's RPN output into clipped, NMS-filtered proposals.
template <class T>
ProposalSet propose_rpn(ag::Tape<T>& t, const RpnOut<T>& r, int image_index, double img_w,
                        double img_h, const ProposalConfig& pc) {
  struct Cand {
    Box box;
    double score;
  };
  std::vector<Cand> cands;
  BoxCoder coder;
  coder.stds = {1.0, 1.0, 1.0, 1.0};
  for (std::size_t l = 0; l < r.obj.size(); ++l) {
    const Tensor<T>& O = t.val(r.obj[l]);
    const Tensor<T>& D = t.val(r.deltas[l]);
    const int h = O.dim(2), w = O.dim(3);
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        Box a = anchor_at(static_cast<int>(l), iy, ix, pc.anchor_scale);
        std::array<double, 4> d{static_cast<double>(D.at(image_index, 0, iy, ix)),
                                static_cast<double>(D.at(image_index, 1, iy, ix)),
                                static_cast<double>(D.at(image_index, 2, iy, ix)),
                                static_cast<double>(D.at(image_index, 3, iy, ix))};
        Box b = coder.decode(a, d, img_w, img_h);
        if (b.valid()) cands.push_back({b, static_cast<double>(O.at(image_index, 0, iy, ix))});
      }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.score > b.score; });
  if (static_cast<int>(cands.size()) > pc.rpn_pre_nms)
    cands.resize(static_cast<std::size_t>(pc.rpn_pre_nms));
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const Cand& c : cands) {
    boxes.push_back(c.box);
    scores.push_back(c.score);
  }
  std::vector<int> keep = nms(boxes, scores, pc.rpn_nms_iou);
  if (static_cast<int>(keep.size()) > pc.rpn_post_nms)
    keep.resize(static_cast<std::size_t>(pc.rpn_post_nms));
  ProposalSet out;
  out.source = "rpn_lite";
  for (int k : keep) {
    out.boxes.push_back(boxes[static_cast<std::size_t>(k)]);
    out.objectness.push_back(1.0 / (1.0 + std::exp(-scores[static_cast<std::size_t>(k)])));
  }
  return out;
}

// Objectness BCE + smooth-L1 on positive anchors, normalized by the number of
// sampled anchors. Anchors with IoU >= 0.5 (or the best anchor of each GT)
// are positive, < 0.3 negative, the rest ignored.
template <class T>
ag::Var rpn_loss(ag::Tape<T>& t, const RpnOut<T>& r, int image_index, const std::vector<Box>& gt,
                 double img_w, double img_h, const ProposalConfig& pc, Rng& rng) {
  struct Slot {
    int level, iy, ix;
    Box anchor;
  };
  std::vector<Slot> slots;
  std::vector<int> level_off;
  for (std::size_t l = 0; l < r.obj.size(); ++l) {
    const Tensor<T>& O = t.val(r.obj[l]);
    level_off.push_back(static_cast<int>(slots.size()));
    for (int iy = 0; iy < O.dim(2); ++iy)
      for (int ix = 0; ix < O.dim(3); ++ix)
        slots.push_back({static_cast<int>(l), iy, ix, anchor_at(static_cast<int>(l), iy, ix,
                                                                pc.anchor_scale)});
  }
  const int n = static_cast<int>(slots.size());
  std::vector<int> kind(static_cast<std::size_t>(n), 0);  // 1 pos, -1 neg, 0 ignore
  std::vector<int> match(static_cast<std::size_t>(n), -1);
  std::vector<double> best_per_gt(gt.size(), 0.0);
  std::vector<int> best_anchor(gt.size(), -1);
  for (int i = 0; i < n; ++i) {
    double mx = 0.0;
    int mg = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      double v = iou(slots[static_cast<std::size_t>(i)].anchor, gt[g]);
      if (v > mx) {
        mx = v;
        mg = static_cast<int>(g);
      }
      if (v > best_per_gt[g]) {
        best_per_gt[g] = v;
        best_anchor[g] = i;
      }
    }
    if (mx >= 0.5) {
      kind[static_cast<std::size_t>(i)] = 1;
      match[static_cast<std::size_t>(i)] = mg;
    } else if (mx < 0.3) {
      kind[static_cast<std::size_t>(i)] = -1;
    }
  }
  for (std::size_t g = 0; g < gt.size(); ++g)
    if (best_anchor[g] >= 0 && best_per_gt[g] > 0.0) {
      kind[static_cast<std::size_t>(best_anchor[g])] = 1;
      match[static_cast<std::size_t>(best_anchor[g])] = static_cast<int>(g);
    }
  std::vector<int> pos, neg;
  for (int i = 0; i < n; ++i)
    if (kind[static_cast<std::size_t>(i)] == 1)
      pos.push_back(i);
    else if (kind[static_cast<std::size_t>(i)] == -1)
      neg.push_back(i);
  auto subsample = [&](std::vector<int>& v, int keep) {
    if (static_cast<int>(v.size()) <= keep) return;
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(
                              static_cast<std::int64_t>(v.size() - i)));
      std::swap(v[i], v[j]);
    }
    v.resize(static_cast<std::size_t>(keep));
    std::sort(v.begin(), v.end());
  };
  subsample(pos, 32);
  subsample(neg, 64 - static_cast<int>(pos.size()));
  std::vector<int> sampled = pos;
  sampled.insert(sampled.end(), neg.begin(), neg.end());
  const int ns = static_cast<int>(sampled.size());
  if (ns == 0) {
    Tensor<T> z({1});
    return t.leaf(std::move(z));
  }
  // objectness logits, flattened per level then gathered at sampled slots
  std::vector<ag::Var> flat_obj, flat_del;
  for (std::size_t l = 0; l < r.obj.size(); ++l) {
    const Tensor<T>& O = t.val(r.obj[l]);
    const int hw = O.dim(2) * O.dim(3);
    flat_obj.push_back(ag::reshape(t, ag::slice_n(t, r.obj[l], image_index), {hw}));
    flat_del.push_back(ag::reshape(t, ag::slice_n(t, r.deltas[l], image_index), {4 * hw}));
  }
  // a slot's global index equals its position in the concatenated layout
  ag::Var obj_all = ag::concat_n(t, flat_obj);
  std::vector<int> obj_idx;
  Tensor<T> obj_tgt({ns});
  for (int k = 0; k < ns; ++k) {
    int i = sampled[static_cast<std::size_t>(k)];
    obj_idx.push_back(i);
    obj_tgt.v[static_cast<std::size_t>(k)] =
        kind[static_cast<std::size_t>(i)] == 1 ? T(1) : T(0);
  }
  ag::Var obj_sel = ag::gather(t, obj_all, obj_idx);
  ag::Var l_obj = ag::scale(t, ag::bce_logits_sum(t, obj_sel, std::move(obj_tgt)), 1.0 / ns);
  ag::Var total = l_obj;
  if (!pos.empty()) {
    BoxCoder coder;
    coder.stds = {1.0, 1.0, 1.0, 1.0};
    std::vector<int> didx;
    Tensor<T> dtgt({static_cast<int>(pos.size()), 4});
    for (std::size_t k = 0; k < pos.size(); ++k) {
      int i = pos[k];
      const Slot& s = slots[static_cast<std::size_t>(i)];
      const Tensor<T>& O = t.val(r.obj[static_cast<std::size_t>(s.level)]);
      const int hw = O.dim(2) * O.dim(3);
      int cell = s.iy * O.dim(3) + s.ix;
      int base = 4 * level_off[static_cast<std::size_t>(s.level)];
      for (int c = 0; c < 4; ++c) didx.push_back(base + c * hw + cell);
      auto enc = coder.encode(s.anchor, gt[static_cast<std::size_t>(
                                            match[static_cast<std::size_t>(i)])]);
      for (int c = 0; c < 4; ++c) dtgt.at(static_cast<int>(k), c) = static_cast<T>(enc[c]);
    }
    ag::Var del_all = ag::concat_n(t, flat_del);
    ag::Var del_sel =
        ag::reshape(t, ag::gather(t, del_all, std::move(didx)), {static_cast<int>(pos.size()), 4});
    std::vector<T> w(pos.size(), T(1));
    total = ag::add_scalars(
        t, {total, ag::smooth_l1(t, del_sel, std::move(dtgt), std::move(w), 1.0, ns)});
  }
  (void)img_w;
  (void)img_h;
  return total;
}

// ---------------------------------------------------------------------------
// Optimizer: SGD with momentum, weight decay, linear warm-up, step decay

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double gamma = 0.1;
  int warmup_steps = 500;
  std::vector<long long> milestones;
};

inline std::vector<long long> schedule_milestones(long long total_steps) {
  return {2 * total_steps / 3, 11 * total_steps / 12};
}

inline double lr_at(const SgdConfig& c, long long step) {
  double lr = c.lr;
  if (c.warmup_steps > 0 && step < c.warmup_steps)
    lr *= static_cast<double>(step + 1) / c.warmup_steps;
  for (long long m : c.milestones)
    if (step >= m) lr *= c.gamma;
  return lr;
}

template <class T>
struct Sgd {
  SgdConfig cfg;
  long long step_count = 0;
  std::vector<Tensor<T>> velocity;  // aligned with Bound::ordered

  // One update on the gradients currently on the tape; returns the lr used.
  double apply(ag::Tape<T>& t, Bound<T>& b) {
    const double lr = lr_at(cfg, step_count);
    if (velocity.empty())
      for (auto& [name, var] : b.ordered) {
        (void)name;
        velocity.emplace_back(t.val(var).shape);
      }
    if (velocity.size() != b.ordered.size())
      throw std::runtime_error("Sgd: optimizer state does not match parameter list");
    for (std::size_t k = 0; k < b.ordered.size(); ++k) {
      ag::Var var = b.ordered[k].second;
      Tensor<T>& p = t.val(var);
      const Tensor<T>& g = t.grad(var);
      Tensor<T>& v = velocity[k];
      if (!v.same_shape(p)) throw std::runtime_error("Sgd: state shape mismatch");
      const T mu = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay);
      for (std::size_t j = 0; j < p.numel(); ++j) {
        v.v[j] = mu * v.v[j] + g.v[j] + wd * p.v[j];
        p.v[j] -= static_cast<T>(lr) * v.v[j];
      }
    }
    ++step_count;
    return lr;
  }
};

// ---------------------------------------------------------------------------
// Training step

struct TrainStepConfig {
  ProposalConfig proposals;
  int max_rois_per_image = 128;
  int fg_cap = 32;
  double smooth_l1_beta = 1.0;
};

struct StepResult {
  LossBundle losses;
  double lr = 0.0;
  int rois = 0;
};

// Builds the full graph for one batch, backpropagates the unweighted sum of
// the enabled loss terms, and applies one optimizer update.
template <class T>
StepResult train_step(Model<T>& m, const std::vector<const AnnotatedImage*>& batch,
                      const TrainStepConfig& tc, Sgd<T>& opt, Rng& rng) {
  const ModelSpec& spec = m.spec;
  tc.proposals.validate();
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const bool use_rpn = tc.proposals.source == "rpn_lite";
  if (use_rpn && !spec.with_rpn)
    throw std::invalid_argument("train_step: rpn_lite proposals need a model built with_rpn");
  const int N = static_cast<int>(batch.size());
  const int C = spec.num_classes;
  const int H = batch[0]->pixels.dim(1), W = batch[0]->pixels.dim(2);

  ag::Tape<T> t;
  Bound<T> B = bind(t, m);

  Tensor<T> imgs({N, 3, H, W});
  for (int i = 0; i < N; ++i) {
    const Tensor<float>& px = batch[static_cast<std::size_t>(i)]->pixels;
    if (px.dim(1) != H || px.dim(2) != W)
      throw std::invalid_argument("train_step: images in a batch must share one size");
    for (std::size_t j = 0; j < px.numel(); ++j)
      imgs.v[static_cast<std::size_t>(i) * px.numel() + j] =
          static_cast<T>(px.v[j]) - static_cast<T>(0.5);  // center pixels at zero
  }
  ag::Var images = t.leaf(std::move(imgs));
  Pyramid<T> pyr = backbone_forward(t, B, images);

  ag::Var X{};  // context-embedded image feature
  std::vector<ag::Var> terms;
  ag::Var l_mll{}, l_rpn{};
  if (spec.use_mll) {
    X = embed_image_context(t, B, pyr.top);
    std::vector<std::vector<int>> ys;
    for (const AnnotatedImage* a : batch) ys.push_back(a->y);
    l_mll = multilabel_loss(t, multilabel_logits(t, B, X), ys);
    terms.push_back(l_mll);
  }

  RpnOut<T> rpn;
  if (use_rpn) rpn = rpn_forward(t, B, pyr);

  std::vector<ag::Var> mains, ctxs, fpns;
  std::vector<int> labels;
  std::vector<Box> all_props;
  std::vector<std::array<double, 4>> enc_targets;
  std::vector<T> box_weight;
  std::vector<ag::Var> rpn_terms;
  BoxCoder coder;
  for (int i = 0; i < N; ++i) {
    const AnnotatedImage& a = *batch[static_cast<std::size_t>(i)];
    std::vector<Box> gt;
    std::vector<int> gt_cat;
    for (const Instance& in : a.instances) {
      gt.push_back(in.box);
      gt_cat.push_back(in.category);
    }
    ProposalSet props;
    if (use_rpn) {
      rpn_terms.push_back(rpn_loss(t, rpn, i, gt, W, H, tc.proposals, rng));
      props = propose_rpn(t, rpn, i, W, H, tc.proposals);
      for (const Box& g : gt) props.boxes.push_back(g);  // stabilizes early training
    } else {
      props = propose_gt_jitter(gt, W, H, tc.proposals, rng);
    }
    if (props.boxes.empty()) continue;
    RoiTargets rt = label_proposals(props.boxes, gt, gt_cat, C);
    std::vector<int> pick = sample_rois(rt, tc.max_rois_per_image, tc.fg_cap, rng);
    if (pick.empty()) continue;
    std::vector<Box> boxes;
    for (int k : pick) {
      const Box& p = props.boxes[static_cast<std::size_t>(k)];
      boxes.push_back(p);
      all_props.push_back(p);
      int lab = rt.labels[static_cast<std::size_t>(k)];
      labels.push_back(lab);
      if (rt.matched_gt[static_cast<std::size_t>(k)] >= 0) {
        enc_targets.push_back(coder.encode(
            p, gt[static_cast<std::size_t>(rt.matched_gt[static_cast<std::size_t>(k)])]));
        box_weight.push_back(T(1));
      } else {
        enc_targets.push_back({0, 0, 0, 0});
        box_weight.push_back(T(0));
      }
    }
    RoiBundle<T> rb = build_roi_bundle(t, B, pyr, X, i, boxes, W, H,
                                       spec.ff_train && spec.use_instance);
    mains.push_back(rb.x_main);
    if (rb.has_context) {
      ctxs.push_back(rb.x_context);
      fpns.push_back(rb.x_fpn);
    }
  }
  if (labels.empty()) throw std::runtime_error("train_step: no usable proposals in batch");
  const int R = static_cast<int>(labels.size());

  HeadOut<T> main = head_forward(t, B, ag::concat_n(t, mains));
  ag::Var l_cls = ag::softmax_ce_mean(t, main.cls, labels);
  Tensor<T> tgt({R, 4});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < 4; ++c)
      tgt.at(r, c) = static_cast<T>(enc_targets[static_cast<std::size_t>(r)][
          static_cast<std::size_t>(c)]);
  ag::Var l_box = ag::smooth_l1(t, ag::select_deltas(t, main.box, labels), std::move(tgt),
                                std::move(box_weight), tc.smooth_l1_beta, R);
  ag::Var l_feat = ag::add_scalars(t, {l_cls, l_box});
  terms.push_back(l_feat);

  ag::Var l_conf{};
  if (spec.cf_train && !ctxs.empty()) {
    l_conf = ag::softmax_ce_mean(
        t, confidence_fusion(t, B, ag::concat_n(t, ctxs), ag::concat_n(t, fpns)), labels);
    terms.push_back(l_conf);
  }
  if (use_rpn && !rpn_terms.empty()) {
    l_rpn = ag::scale(t, ag::add_scalars(t, rpn_terms), 1.0 / N);
    terms.push_back(l_rpn);
  }

  ag::Var total = ag::add_scalars(t, terms);
  auto host = [&](ag::Var v) -> double { return v.ok() ? static_cast<double>(t.val(v).v[0]) : 0.0; };
  StepResult res;
  res.losses = total_loss(host(l_feat), host(l_conf), host(l_mll), host(l_rpn));
  res.rois = R;
  t.backward(total);
  res.lr = opt.apply(t, B);
  return res;
}

// ---------------------------------------------------------------------------
// Inference

struct Detection {
  Box box;
  int category = 0;  // in [0, C)
  double score = 0.0;
  std::string branch;  // {feature_fusion, confidence_fusion}
};

struct InferenceFlags {
  bool use_ff = true;
  bool use_cf = false;
  std::string cf_box_source = "fusion";  // {fusion, fpn}
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_per_image = 100;
};

// Scores from the enabled branches are pooled, thresholded, passed through
// per-class NMS, and capped. Confidence-fusion scores ride on the boxes
// decoded from the fused feature by default, so with both branches on, every
// confidence-fusion box coincides exactly with a feature-fusion box.
template <class T>
std::vector<Detection> run_inference(Model<T>& m, const Tensor<float>& pixels,
                                     const std::vector<Box>& proposals,
                                     const InferenceFlags& fl) {
  const ModelSpec& spec = m.spec;
  if (!fl.use_ff && !fl.use_cf)
    throw std::invalid_argument("run_inference: enable at least one of use_ff/use_cf");
  if (fl.cf_box_source != "fusion" && fl.cf_box_source != "fpn")
    throw std::invalid_argument("run_inference: cf_box_source must be fusion or fpn");
  if (fl.use_cf && !spec.use_instance)
    throw std::invalid_argument(
        "run_inference: confidence fusion needs a model with instance-level context");
  if (proposals.empty()) return {};
  const int H = pixels.dim(1), W = pixels.dim(2);
  const int C = spec.num_classes;

  ag::Tape<T> t;
  Bound<T> B = bind(t, m);
  Tensor<T> img({1, 3, H, W});
  for (std::size_t j = 0; j < pixels.numel(); ++j)
    img.v[j] = static_cast<T>(pixels.v[j]) - static_cast<T>(0.5);
  ag::Var images = t.leaf(std::move(img));
  Pyramid<T> pyr = backbone_forward(t, B, images);
  ag::Var X{};
  if (spec.use_mll) X = embed_image_context(t, B, pyr.top);

  const bool need_fusion = fl.use_ff || (fl.use_cf && fl.cf_box_source == "fusion");
  RoiBundle<T> rb = build_roi_bundle(t, B, pyr, X, 0, proposals, W, H,
                                     need_fusion && spec.use_instance);

  BoxCoder coder;
  const int R = static_cast<int>(proposals.size());
  auto softmax_row = [&](const Tensor<T>& Z, int r, std::vector<double>& p) {
    double mx = -1e300;
    for (int c = 0; c <= C; ++c) mx = std::max(mx, static_cast<double>(Z.at(r, c)));
    double s = 0.0;
    for (int c = 0; c <= C; ++c) {
      p[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(Z.at(r, c)) - mx);
      s += p[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c <= C; ++c) p[static_cast<std::size_t>(c)] /= s;
  };
  auto decode_class_box = [&](const Tensor<T>& D, int r, int c) {
    std::array<double, 4> d{static_cast<double>(D.at(r, 4 * c + 0)),
                            static_cast<double>(D.at(r, 4 * c + 1)),
                            static_cast<double>(D.at(r, 4 * c + 2)),
                            static_cast<double>(D.at(r, 4 * c + 3))};
    return coder.decode(proposals[static_cast<std::size_t>(r)], d, W, H);
  };

  HeadOut<T> hf{}, hc{}, hp{};
  if (need_fusion) hf = head_forward(t, B, rb.x_main);
  if (fl.use_cf) {
    hc = head_forward(t, B, rb.x_context);
    hp = head_forward(t, B, rb.x_fpn);
  }

  std::vector<Detection> cand;
  std::vector<double> prob(static_cast<std::size_t>(C + 1));
  if (fl.use_ff) {
    const Tensor<T>& Z = t.val(hf.cls);
    const Tensor<T>& D = t.val(hf.box);
    for (int r = 0; r < R; ++r) {
      softmax_row(Z, r, prob);
      for (int c = 0; c < C; ++c)
        if (prob[static_cast<std::size_t>(c)] >= fl.score_thresh) {
          Box b = decode_class_box(D, r, c);
          if (b.valid())
            cand.push_back({b, c, prob[static_cast<std::size_t>(c)], "feature_fusion"});
        }
    }
  }
  if (fl.use_cf) {
    ag::Var fused = ag::add(t, hc.cls, hp.cls);
    const Tensor<T>& Z = t.val(fused);
    const Tensor<T>& D = t.val(fl.cf_box_source == "fusion" ? hf.box : hp.box);
    for (int r = 0; r < R; ++r) {
      softmax_row(Z, r, prob);
      for (int c = 0; c < C; ++c)
        if (prob[static_cast<std::size_t>(c)] >= fl.score_thresh) {
          Box b = decode_class_box(D, r, c);
          if (b.valid())
            cand.push_back({b, c, prob[static_cast<std::size_t>(c)], "confidence_fusion"});
        }
    }
  }

  // per-class NMS over the pooled candidates, then a global score cap
  std::vector<Detection> out;
  for (int c = 0; c < C; ++c) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<int> src;
    for (std::size_t i = 0; i < cand.size(); ++i)
      if (cand[i].category == c) {
        boxes.push_back(cand[i].box);
        scores.push_back(cand[i].score);
        src.push_back(static_cast<int>(i));
      }
    if (boxes.empty()) continue;
    for (int k : nms(boxes, scores, fl.nms_iou))
      out.push_back(cand[static_cast<std::size_t>(src[static_cast<std::size_t>(k)])]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(out.size()) > fl.max_per_image)
    out.resize(static_cast<std::size_t>(fl.max_per_image));
  return out;
}

}  // namespace hce
