#include "hce/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace hce {

const char* error_type_name(ErrorType t) {
  switch (t) {
    case ErrorType::Correct: return "correct";
    case ErrorType::Location: return "location";
    case ErrorType::Classification: return "classification";
    case ErrorType::Other: return "other";
    default: return "background";
  }
}

ErrorType classify_error(const Box& pred_box, int pred_category,
                         const std::vector<GtObject>& image_gt) {
  double same = 0.0, any = 0.0;
  for (const auto& g : image_gt) {
    double v = iou(pred_box, g.box);
    any = std::max(any, v);
    if (g.category == pred_category) same = std::max(same, v);
  }
  if (same >= 0.5) return ErrorType::Correct;
  if (same >= 0.1) return ErrorType::Location;
  if (any >= 0.5) return ErrorType::Classification;
  if (any >= 0.1) return ErrorType::Other;
  return ErrorType::Background;
}

ErrorBreakdown error_breakdown(const std::vector<DetectionRecord>& detections,
                               const CocoDataset& gt) {
  std::unordered_set<int> image_ids;
  for (const auto& im : gt.images) image_ids.insert(im.id);
  std::unordered_set<int> category_ids;
  for (const auto& c : gt.categories) category_ids.insert(c.id);
  for (const auto& d : detections) {
    if (!image_ids.count(d.image_id))
      throw std::runtime_error("error analysis: detection references unknown image_id " +
                               std::to_string(d.image_id));
    if (!category_ids.count(d.category_id))
      throw std::runtime_error("error analysis: detection references unknown category_id " +
                               std::to_string(d.category_id));
  }

  std::unordered_map<int, std::vector<GtObject>> gt_by_image;
  std::unordered_map<int, int> gt_count;
  for (const auto& a : gt.annotations) {
    gt_by_image[a.image_id].push_back({a.box, a.category_id});
    gt_count[a.category_id]++;
  }
  std::unordered_map<int, std::vector<int>> det_by_cat;
  for (size_t i = 0; i < detections.size(); ++i)
    det_by_cat[detections[i].category_id].push_back(static_cast<int>(i));

  ErrorBreakdown out;
  std::array<double, kNumErrorTypes> macro_sum{};
  for (const auto& cat : gt.categories) {
    CategoryErrors ce;
    ce.category_id = cat.id;
    ce.name = cat.name;
    auto cit = gt_count.find(cat.id);
    ce.n_gt = cit == gt_count.end() ? 0 : cit->second;
    if (ce.n_gt > 0) {
      auto dit = det_by_cat.find(cat.id);
      std::vector<int> top;
      if (dit != det_by_cat.end()) {
        top = dit->second;
        std::stable_sort(top.begin(), top.end(), [&](int a, int b) {
          return detections[a].score > detections[b].score;
        });
        if (static_cast<int>(top.size()) > ce.n_gt) top.resize(ce.n_gt);
      }
      ce.n_used = static_cast<int>(top.size());
      static const std::vector<GtObject> kNoGt;
      for (int di : top) {
        auto git = gt_by_image.find(detections[di].image_id);
        const auto& objs = git == gt_by_image.end() ? kNoGt : git->second;
        ErrorType t = classify_error(detections[di].box, detections[di].category_id, objs);
        ce.counts[static_cast<int>(t)]++;
      }
      if (ce.n_used > 0) {
        for (int k = 0; k < kNumErrorTypes; ++k)
          ce.pct[k] = 100.0 * ce.counts[k] / ce.n_used;
        for (int k = 0; k < kNumErrorTypes; ++k) macro_sum[k] += ce.pct[k];
        out.categories_in_macro++;
      }
    }
    out.per_category.push_back(std::move(ce));
  }
  if (out.categories_in_macro > 0)
    for (int k = 0; k < kNumErrorTypes; ++k)
      out.macro_pct[k] = macro_sum[k] / out.categories_in_macro;
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

const char* kBarColors[kNumErrorTypes] = {
    "#4daf4a",  // correct
    "#377eb8",  // location
    "#ff7f00",  // classification
    "#984ea3",  // other
    "#e41a1c",  // background
};

}  // namespace

void render_breakdown(const ErrorBreakdown& b, const std::string& csv_path,
                      const std::string& svg_path) {
  {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("error analysis: cannot write " + csv_path);
    csv << "category,n_gt,n_used,correct_pct,location_pct,classification_pct,"
           "other_pct,background_pct\n";
    long all_gt = 0, all_used = 0;
    for (const auto& ce : b.per_category) {
      all_gt += ce.n_gt;
      all_used += ce.n_used;
      csv << ce.name << ',' << ce.n_gt << ',' << ce.n_used;
      for (int k = 0; k < kNumErrorTypes; ++k) csv << ',' << fmt(ce.pct[k]);
      csv << '\n';
    }
    csv << "all," << all_gt << ',' << all_used;
    for (int k = 0; k < kNumErrorTypes; ++k) csv << ',' << fmt(b.macro_pct[k]);
    csv << '\n';
  }

  // Stacked percentage bars, one per category plus the macro average.
  int nbars = static_cast<int>(b.per_category.size()) + 1;
  double bar_w = 36.0, gap = 14.0, left = 46.0, top = 34.0, plot_h = 220.0;
  double width = left + nbars * (bar_w + gap) + 12.0;
  double height = top + plot_h + 46.0;

  std::ofstream svg(svg_path, std::ios::trunc);
  if (!svg) throw std::runtime_error("error analysis: cannot write " + svg_path);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\""
      << fmt(height) << "\" viewBox=\"0 0 " << fmt(width) << ' ' << fmt(height) << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int k = 0; k < kNumErrorTypes; ++k) {
    double lx = left + k * 104.0;
    svg << "<rect x=\"" << fmt(lx) << "\" y=\"8\" width=\"10\" height=\"10\" fill=\""
        << kBarColors[k] << "\"/>\n";
    svg << "<text x=\"" << fmt(lx + 14.0) << "\" y=\"17\" font-family=\"sans-serif\" "
           "font-size=\"10\">"
        << error_type_name(static_cast<ErrorType>(k)) << "</text>\n";
  }
  for (int g = 0; g <= 4; ++g) {
    double y = top + plot_h * (1.0 - g * 0.25);
    svg << "<line x1=\"" << fmt(left - 4.0) << "\" y1=\"" << fmt(y) << "\" x2=\""
        << fmt(width - 8.0) << "\" y2=\"" << fmt(y) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"6\" y=\"" << fmt(y + 3.0) << "\" font-family=\"sans-serif\" "
           "font-size=\"10\">"
        << g * 25 << "%</text>\n";
  }
  auto draw_bar = [&](int index, const std::string& label,
                      const std::array<double, kNumErrorTypes>& pct) {
    double x = left + index * (bar_w + gap);
    double y = top + plot_h;
    for (int k = 0; k < kNumErrorTypes; ++k) {
      double h = plot_h * pct[k] / 100.0;
      y -= h;
      svg << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(bar_w)
          << "\" height=\"" << fmt(h) << "\" fill=\"" << kBarColors[k] << "\"/>\n";
    }
    svg << "<text x=\"" << fmt(x + bar_w / 2.0) << "\" y=\"" << fmt(top + plot_h + 16.0)
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << label
        << "</text>\n";
  };
  for (size_t i = 0; i < b.per_category.size(); ++i)
    draw_bar(static_cast<int>(i), b.per_category[i].name, b.per_category[i].pct);
  draw_bar(nbars - 1, "all", b.macro_pct);
  svg << "</svg>\n";
}

}  // namespace hce
