#pragma once

#include <array>
#include <string>
#include <vector>

#include "hce/box.hpp"
#include "hce/coco_io.hpp"

namespace hce {

struct EvalConfig {
  std::vector<double> iou_thresholds;  // default 0.50, 0.55, ..., 0.95
  double area_scale = 0.25;            // rescales the 32/96-pixel COCO band edges
  int max_dets = 100;                  // per image and category

  EvalConfig();
  void validate() const;
  double small_edge() const { return 32.0 * area_scale; }
  double medium_edge() const { return 96.0 * area_scale; }
};

struct ApSummary {
  double ap = 0.0;      // mean over thresholds and categories
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;   // -1 when the split holds no ground truth in a band
  double ap_medium = 0.0;
  double ap_large = 0.0;
};

// COCO-style average precision: greedy score-descending matching per image,
// category, and threshold (each ground truth matched at most once), 101-point
// interpolated precision, averaged over thresholds and over categories that
// have ground truth. Area-band variants ignore ground truth outside the band,
// matches to ignored ground truth, and unmatched detections outside the band.
ApSummary compute_ap(const std::vector<DetectionRecord>& detections, const CocoDataset& gt,
                     const EvalConfig& cfg);

// ---------------------------------------------------------------------------
// Error-type analysis

enum class ErrorType { Correct, Location, Classification, Other, Background };
constexpr int kNumErrorTypes = 5;

const char* error_type_name(ErrorType t);

struct GtObject {
  Box box;
  int category = 0;
};

// Buckets one prediction against its image's ground truth. Rules, evaluated
// in order with the first match winning:
//   Correct:        same-class IoU >= 0.5
//   Location:       same-class IoU in [0.1, 0.5)
//   Classification: any-class IoU >= 0.5 (same-class already below 0.5)
//   Other:          any-class IoU in [0.1, 0.5)
//   Background:     every IoU < 0.1
// Boundary values land in the higher-IoU bucket, making the five exhaustive.
ErrorType classify_error(const Box& pred_box, int pred_category,
                         const std::vector<GtObject>& image_gt);

struct CategoryErrors {
  int category_id = 0;
  std::string name;
  int n_gt = 0;    // N: ground-truth objects of this category in the split
  int n_used = 0;  // available predictions among the top N
  std::array<int, kNumErrorTypes> counts{};     // indexed by ErrorType
  std::array<double, kNumErrorTypes> pct{};     // percentages over n_used
};

struct ErrorBreakdown {
  std::vector<CategoryErrors> per_category;          // dataset category order
  std::array<double, kNumErrorTypes> macro_pct{};    // mean over counted categories
  int categories_in_macro = 0;
};

// Takes each category's top-N predictions by score (N = that category's
// ground-truth count), buckets them, and reports per-category and
// macro-averaged percentages, which normalize over the predictions actually
// available. Every dataset category gets a row; those without ground truth or
// without predictions keep zero percentages and stay out of the macro average.
ErrorBreakdown error_breakdown(const std::vector<DetectionRecord>& detections,
                               const CocoDataset& gt);

// Writes the machine-readable table (CSV) and a stacked-bar figure (SVG).
// Output is deterministic for a given breakdown.
void render_breakdown(const ErrorBreakdown& b, const std::string& csv_path,
                      const std::string& svg_path);

}  // namespace hce
