#include "hce/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace hce {

EvalConfig::EvalConfig() {
  for (int i = 0; i < 10; ++i) iou_thresholds.push_back((50 + 5 * i) / 100.0);
}

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw std::runtime_error("eval: iou_thresholds is empty");
  for (size_t i = 0; i < iou_thresholds.size(); ++i) {
    double t = iou_thresholds[i];
    if (!(t > 0.0 && t <= 1.0)) throw std::runtime_error("eval: iou threshold outside (0, 1]");
    if (i > 0 && !(t > iou_thresholds[i - 1]))
      throw std::runtime_error("eval: iou_thresholds must increase strictly");
  }
  if (!(area_scale > 0.0)) throw std::runtime_error("eval: area_scale must be positive");
  if (max_dets < 1) throw std::runtime_error("eval: max_dets must be at least 1");
}

namespace {

// Bands partition by box area: 0 = all, 1 = small, 2 = medium, 3 = large.
constexpr int kNumBands = 4;

bool in_band(double area, int band, const EvalConfig& cfg) {
  double s = cfg.small_edge() * cfg.small_edge();
  double m = cfg.medium_edge() * cfg.medium_edge();
  switch (band) {
    case 0: return true;
    case 1: return area < s;
    case 2: return area >= s && area < m;
    default: return area >= m;
  }
}

// Outcome of one detection at one threshold.
enum : uint8_t { kFalsePos = 0, kTruePos = 1, kIgnored = 2 };

// One pooled detection of a category within a band, carrying its outcome per
// threshold. `orig` is the position in the input list, the tie-break for
// equal scores.
struct Slot {
  double score = 0.0;
  int orig = 0;
  std::vector<uint8_t> outcome;
};

// Area under the precision-recall curve sampled at recalls 0.00, 0.01, ...,
// 1.00, each taking the best precision achieved at that recall or beyond.
double interp101(std::vector<double>& recall, std::vector<double>& prec) {
  int n = static_cast<int>(recall.size());
  for (int i = n - 2; i >= 0; --i) prec[i] = std::max(prec[i], prec[i + 1]);
  double sum = 0.0;
  int j = 0;
  for (int k = 0; k <= 100; ++k) {
    double r = k / 100.0;
    while (j < n && recall[j] < r) ++j;
    if (j < n) sum += prec[j];
  }
  return sum / 101.0;
}

}  // namespace

ApSummary compute_ap(const std::vector<DetectionRecord>& detections, const CocoDataset& gt,
                     const EvalConfig& cfg) {
  cfg.validate();

  std::unordered_set<int> image_ids;
  for (const auto& im : gt.images) image_ids.insert(im.id);
  std::unordered_set<int> category_ids;
  for (const auto& c : gt.categories) category_ids.insert(c.id);
  for (const auto& d : detections) {
    if (!image_ids.count(d.image_id))
      throw std::runtime_error("eval: detection references unknown image_id " +
                               std::to_string(d.image_id));
    if (!category_ids.count(d.category_id))
      throw std::runtime_error("eval: detection references unknown category_id " +
                               std::to_string(d.category_id));
  }

  int nt = static_cast<int>(cfg.iou_thresholds.size());
  int nc = static_cast<int>(gt.categories.size());

  // Per (category, image) index lists.
  std::unordered_map<int, int> cat_index;
  for (int c = 0; c < nc; ++c) cat_index[gt.categories[c].id] = c;
  std::unordered_map<int64_t, std::vector<int>> gt_by_ci, det_by_ci;
  auto key = [](int cat, int image) {
    return (static_cast<int64_t>(cat) << 32) | static_cast<uint32_t>(image);
  };
  for (size_t i = 0; i < gt.annotations.size(); ++i) {
    const auto& a = gt.annotations[i];
    gt_by_ci[key(cat_index.at(a.category_id), a.image_id)].push_back(static_cast<int>(i));
  }
  for (size_t i = 0; i < detections.size(); ++i) {
    const auto& d = detections[i];
    det_by_ci[key(cat_index.at(d.category_id), d.image_id)].push_back(static_cast<int>(i));
  }

  // ap[c][band][t]; n_gt[c][band] counts unignored ground truth.
  std::vector<std::vector<std::vector<double>>> ap(
      nc, std::vector<std::vector<double>>(kNumBands, std::vector<double>(nt, 0.0)));
  std::vector<std::array<long, kNumBands>> n_gt(nc, {0, 0, 0, 0});

  for (int c = 0; c < nc; ++c) {
    for (int band = 0; band < kNumBands; ++band) {
      std::vector<Slot> slots;
      for (const auto& im : gt.images) {
        auto git = gt_by_ci.find(key(c, im.id));
        auto dit = det_by_ci.find(key(c, im.id));

        // Ground truth split into counted and ignored, counted first so the
        // matcher prefers them.
        std::vector<int> order;
        std::vector<bool> gig;
        if (git != gt_by_ci.end()) {
          for (int gi : git->second)
            if (in_band(gt.annotations[gi].box.area(), band, cfg)) order.push_back(gi);
          size_t counted = order.size();
          for (int gi : git->second)
            if (!in_band(gt.annotations[gi].box.area(), band, cfg)) order.push_back(gi);
          gig.assign(order.size(), false);
          for (size_t g = counted; g < order.size(); ++g) gig[g] = true;
          n_gt[c][band] += static_cast<long>(counted);
        }

        if (dit == det_by_ci.end()) continue;
        std::vector<int> dets = dit->second;
        std::stable_sort(dets.begin(), dets.end(), [&](int a, int b) {
          return detections[a].score > detections[b].score;
        });
        if (static_cast<int>(dets.size()) > cfg.max_dets) dets.resize(cfg.max_dets);

        size_t base = slots.size();
        for (int di : dets) {
          Slot s;
          s.score = detections[di].score;
          s.orig = di;
          s.outcome.assign(nt, kFalsePos);
          slots.push_back(std::move(s));
        }

        for (int ti = 0; ti < nt; ++ti) {
          double thresh = cfg.iou_thresholds[ti];
          std::vector<bool> taken(order.size(), false);
          for (size_t s = 0; s < dets.size(); ++s) {
            const Box& db = detections[dets[s]].box;
            // Best unmatched counted ground truth at or above the threshold;
            // failing that, best unmatched ignored one.
            int best = -1;
            double best_iou = 0.0;
            for (size_t g = 0; g < order.size(); ++g) {
              if (taken[g]) continue;
              if (best >= 0 && !gig[best] && gig[g]) break;  // counted match already found
              double v = iou(db, gt.annotations[order[g]].box);
              if (v < thresh || v <= best_iou) continue;
              best = static_cast<int>(g);
              best_iou = v;
            }
            uint8_t& out = slots[base + s].outcome[ti];
            if (best >= 0) {
              taken[best] = true;
              out = gig[best] ? kIgnored : kTruePos;
            } else {
              out = in_band(db.area(), band, cfg) ? kFalsePos : kIgnored;
            }
          }
        }
      }

      std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.orig < b.orig;
      });

      long total = n_gt[c][band];
      for (int ti = 0; ti < nt; ++ti) {
        if (total == 0) continue;  // cell stays unused
        std::vector<double> recall, prec;
        long tp = 0, fp = 0;
        for (const auto& s : slots) {
          if (s.outcome[ti] == kIgnored) continue;
          (s.outcome[ti] == kTruePos ? tp : fp)++;
          recall.push_back(static_cast<double>(tp) / static_cast<double>(total));
          prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        }
        ap[c][band][ti] = interp101(recall, prec);
      }
    }
  }

  // Cells without ground truth drop out of each mean; -1 when none remain.
  auto mean_over = [&](int band, int only_ti) {
    double sum = 0.0;
    long count = 0;
    for (int c = 0; c < nc; ++c) {
      if (n_gt[c][band] == 0) continue;
      for (int ti = 0; ti < nt; ++ti) {
        if (only_ti >= 0 && ti != only_ti) continue;
        sum += ap[c][band][ti];
        ++count;
      }
    }
    return count ? sum / static_cast<double>(count) : -1.0;
  };
  auto thresh_index = [&](double want) {
    for (int ti = 0; ti < nt; ++ti)
      if (std::fabs(cfg.iou_thresholds[ti] - want) < 1e-9) return ti;
    return -1;
  };

  ApSummary out;
  out.ap = mean_over(0, -1);
  int t50 = thresh_index(0.50), t75 = thresh_index(0.75);
  out.ap50 = t50 >= 0 ? mean_over(0, t50) : -1.0;
  out.ap75 = t75 >= 0 ? mean_over(0, t75) : -1.0;
  out.ap_small = mean_over(1, -1);
  out.ap_medium = mean_over(2, -1);
  out.ap_large = mean_over(3, -1);
  return out;
}

}  // namespace hce
