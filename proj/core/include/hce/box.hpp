#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace hce {

// Axis-aligned box in image coordinates, corner format.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double area() const { return w() * h(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  Box clipped(double img_w, double img_h) const;
};

double iou(const Box& a, const Box& b);

// Greedy NMS. Keeps the highest-score remaining box and discards boxes with
// IoU strictly greater than iou_thresh against it. Kept indices are ordered by
// descending score; score ties break toward the lower input index.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh);

// Fast R-CNN delta parameterization (dx, dy, dw, dh), normalized by per-coord
// standard deviations.
struct BoxCoder {
  std::array<double, 4> stds{0.1, 0.1, 0.2, 0.2};

  std::array<double, 4> encode(const Box& proposal, const Box& target) const;
  Box decode(const Box& proposal, const std::array<double, 4>& delta, double img_w,
             double img_h) const;
};

}  // namespace hce
