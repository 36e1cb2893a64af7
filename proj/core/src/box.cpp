#include "hce/box.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hce {

Box Box::clipped(double img_w, double img_h) const {
  Box b;
  b.x1 = std::clamp(x1, 0.0, img_w);
  b.y1 = std::clamp(y1, 0.0, img_h);
  b.x2 = std::clamp(x2, 0.0, img_w);
  b.y2 = std::clamp(y2, 0.0, img_h);
  return b;
}

double iou(const Box& a, const Box& b) {
  double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  std::vector<int> kept;
  std::vector<char> dead(boxes.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    int a = order[i];
    if (dead[a]) continue;
    kept.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      int b = order[j];
      if (!dead[b] && iou(boxes[a], boxes[b]) > iou_thresh) dead[b] = 1;
    }
  }
  return kept;
}

std::array<double, 4> BoxCoder::encode(const Box& proposal, const Box& target) const {
  double pw = proposal.w(), ph = proposal.h();
  double dx = (target.cx() - proposal.cx()) / pw;
  double dy = (target.cy() - proposal.cy()) / ph;
  double dw = std::log(target.w() / pw);
  double dh = std::log(target.h() / ph);
  return {dx / stds[0], dy / stds[1], dw / stds[2], dh / stds[3]};
}

Box BoxCoder::decode(const Box& proposal, const std::array<double, 4>& delta, double img_w,
                     double img_h) const {
  double dx = delta[0] * stds[0];
  double dy = delta[1] * stds[1];
  double dw = std::clamp(delta[2] * stds[2], -8.0, 8.0);
  double dh = std::clamp(delta[3] * stds[3], -8.0, 8.0);
  double cx = proposal.cx() + dx * proposal.w();
  double cy = proposal.cy() + dy * proposal.h();
  double w = proposal.w() * std::exp(dw);
  double h = proposal.h() * std::exp(dh);
  Box b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  return b.clipped(img_w, img_h);
}

}  // namespace hce
