#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "common_eval.hpp"
#include "hce/eval.hpp"

using namespace hce;
namespace fs = std::filesystem;

namespace {

CocoDataset one_cat_dataset(int n_images = 1) {
  CocoDataset ds;
  for (int i = 0; i < n_images; ++i) ds.images.push_back({i, "im" + std::to_string(i), 96, 96});
  ds.categories.push_back({7, "x"});
  return ds;
}

DetectionRecord det(int image, int cat, Box b, double score) {
  return {image, cat, b, score, "feature_fusion"};
}

struct Instance {
  CocoDataset ds;
  std::vector<DetectionRecord> dets;
};

Box jitter_box(const Box& b, Rng& rng, double f) {
  double w = b.w(), h = b.h();
  double x1 = b.x1 + rng.uniform(-f, f) * w;
  double y1 = b.y1 + rng.uniform(-f, f) * h;
  double x2 = b.x2 + rng.uniform(-f, f) * w;
  double y2 = b.y2 + rng.uniform(-f, f) * h;
  if (x2 < x1 + 1.0) x2 = x1 + 1.0;
  if (y2 < y1 + 1.0) y2 = y1 + 1.0;
  return {x1, y1, x2, y2};
}

Instance random_instance(Rng& rng) {
  Instance in;
  int n_img = 2 + static_cast<int>(rng.uniform_int(4u));
  int n_cat = 3 + static_cast<int>(rng.uniform_int(3u));
  for (int c = 0; c < n_cat; ++c) in.ds.categories.push_back({c, "c" + std::to_string(c)});
  std::set<double> seen_scores;
  auto fresh_score = [&] {
    double s = rng.uniform();
    while (!seen_scores.insert(s).second) s = rng.uniform();
    return s;
  };
  int ann_id = 1;
  for (int i = 0; i < n_img; ++i) {
    in.ds.images.push_back({i, "im" + std::to_string(i), 96, 96});
    int n_gt = static_cast<int>(rng.uniform_int(5u));
    for (int g = 0; g < n_gt; ++g) {
      Box b = testutil::rand_box(rng, 96, 96, 2.0);
      int cat = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_cat)));
      in.ds.annotations.push_back({ann_id++, i, cat, b});
      int copies = static_cast<int>(rng.uniform_int(3u));
      for (int k = 0; k < copies; ++k) {
        Box db = rng.uniform() < 0.25 ? b : jitter_box(b, rng, 0.35);
        int dc = rng.uniform() < 0.8 ? cat : static_cast<int>(rng.uniform_int(
                                                 static_cast<uint64_t>(n_cat)));
        in.dets.push_back(det(i, dc, db, fresh_score()));
      }
    }
    int clutter = static_cast<int>(rng.uniform_int(5u));
    for (int k = 0; k < clutter; ++k)
      in.dets.push_back(det(i, static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_cat))),
                            testutil::rand_box(rng, 96, 96, 2.0), fresh_score()));
  }
  return in;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int count_occurrences(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (size_t p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "hce_test_eval") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("evaluation config validates its inputs") {
  EvalConfig cfg;
  REQUIRE(cfg.iou_thresholds.size() == 10);
  CHECK(cfg.iou_thresholds.front() == 0.50);
  CHECK(cfg.iou_thresholds.back() == 0.95);
  CHECK_NOTHROW(cfg.validate());

  EvalConfig bad = cfg;
  bad.iou_thresholds.clear();
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = cfg;
  bad.iou_thresholds = {0.5, 0.5};
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = cfg;
  bad.iou_thresholds = {0.0, 0.5};
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = cfg;
  bad.area_scale = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = cfg;
  bad.max_dets = 0;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}

TEST_CASE("average precision on elementary cases") {
  EvalConfig cfg;
  auto ds = one_cat_dataset();
  ds.annotations.push_back({1, 0, 7, Box{10, 10, 40, 40}});  // area 900: large band

  SUBCASE("perfect detection scores 1.0 everywhere it applies") {
    std::vector<DetectionRecord> d = {det(0, 7, Box{10, 10, 40, 40}, 0.9)};
    auto s = compute_ap(d, ds, cfg);
    CHECK(s.ap == 1.0);
    CHECK(s.ap50 == 1.0);
    CHECK(s.ap75 == 1.0);
    CHECK(s.ap_large == 1.0);
    CHECK(s.ap_small == -1.0);
    CHECK(s.ap_medium == -1.0);
  }

  SUBCASE("no detections scores zero where ground truth exists") {
    auto s = compute_ap({}, ds, cfg);
    CHECK(s.ap == 0.0);
    CHECK(s.ap50 == 0.0);
    CHECK(s.ap_large == 0.0);
    CHECK(s.ap_small == -1.0);
  }

  SUBCASE("half recall lands on the interpolated 51/101") {
    ds.annotations.push_back({2, 0, 7, Box{50, 50, 80, 80}});
    std::vector<DetectionRecord> d = {det(0, 7, Box{10, 10, 40, 40}, 0.9)};
    auto s = compute_ap(d, ds, cfg);
    // averaging ten equal per-threshold cells rounds in the last bit
    CHECK(s.ap == doctest::Approx(51.0 / 101.0).epsilon(1e-14));
    CHECK(s.ap50 == 51.0 / 101.0);
  }

  SUBCASE("a trailing duplicate after full recall is forgiven by interpolation") {
    std::vector<DetectionRecord> d = {det(0, 7, Box{10, 10, 40, 40}, 0.9),
                                      det(0, 7, Box{10, 10, 40, 40}, 0.8)};
    auto s = compute_ap(d, ds, cfg);
    CHECK(s.ap == 1.0);
  }

  SUBCASE("unknown ids are rejected") {
    std::vector<DetectionRecord> d = {det(9, 7, Box{10, 10, 40, 40}, 0.9)};
    CHECK_THROWS_WITH_AS(compute_ap(d, ds, cfg), doctest::Contains("unknown image_id 9"),
                         std::runtime_error);
    d = {det(0, 99, Box{10, 10, 40, 40}, 0.9)};
    CHECK_THROWS_WITH_AS(compute_ap(d, ds, cfg), doctest::Contains("unknown category_id 99"),
                         std::runtime_error);
  }
}

TEST_CASE("area bands ignore out-of-band boxes on both sides") {
  EvalConfig cfg;  // area_scale 0.25: small < 64, medium < 576, large otherwise
  auto ds = one_cat_dataset();
  ds.annotations.push_back({1, 0, 7, Box{10, 10, 40, 40}});  // 900: large

  // A high-scoring unmatched small box counts against overall AP but is
  // invisible to the large band.
  std::vector<DetectionRecord> d = {det(0, 7, Box{10, 10, 40, 40}, 0.90),
                                    det(0, 7, Box{60, 60, 66, 66}, 0.95)};
  auto s = compute_ap(d, ds, cfg);
  CHECK(s.ap_large == 1.0);
  CHECK(s.ap == 0.5);
  CHECK(s.ap_small == -1.0);

  SUBCASE("the per-image cap keeps only the best-scored detections") {
    EvalConfig capped = cfg;
    capped.max_dets = 1;
    auto c = compute_ap(d, ds, capped);
    CHECK(c.ap == 0.0);
    CHECK(c.ap_large == 0.0);  // the surviving detection is out-of-band and unmatched
  }
}

TEST_CASE("matching prefers in-band ground truth over a better out-of-band overlap") {
  EvalConfig cfg;
  CocoDataset ds = one_cat_dataset();
  // Medium band: the 17x17 box counts, the 30x30 box is ignored. The
  // detection overlaps the ignored box more (0.588 vs 0.546) but must still
  // claim the counted one.
  ds.annotations.push_back({1, 0, 7, Box{0, 0, 17, 17}});
  ds.annotations.push_back({2, 0, 7, Box{0, 0, 30, 30}});
  std::vector<DetectionRecord> d = {det(0, 7, Box{0, 0, 23, 23}, 0.9)};
  REQUIRE(iou(d[0].box, ds.annotations[0].box) > 0.5);
  REQUIRE(iou(d[0].box, ds.annotations[1].box) > iou(d[0].box, ds.annotations[0].box) - 0.1);
  REQUIRE(iou(d[0].box, ds.annotations[1].box) > 0.5);

  auto s = compute_ap(d, ds, cfg);
  CHECK(s.ap_medium > 0.0);  // counted box was matched, not the ignored one

  // In the full band both count, and the higher IoU wins: one of the two
  // stays unmatched, halving recall.
  CHECK(s.ap50 == 51.0 / 101.0);
}

TEST_CASE("average precision matches a direct reference implementation") {
  Rng rng(mix_seed(4242, "eval/reference"));
  for (int inst = 0; inst < 50; ++inst) {
    CAPTURE(inst);
    Instance in = random_instance(rng);
    EvalConfig cfg;
    if (inst % 3 == 0) cfg.max_dets = 2;
    if (inst % 4 == 0) cfg.area_scale = 0.4;
    auto got = compute_ap(in.dets, in.ds, cfg);
    auto want = refeval::reference_ap(in.dets, in.ds, cfg);
    CHECK(std::fabs(got.ap - want.ap) <= 1e-6);
    CHECK(std::fabs(got.ap50 - want.ap50) <= 1e-6);
    CHECK(std::fabs(got.ap75 - want.ap75) <= 1e-6);
    CHECK(std::fabs(got.ap_small - want.ap_small) <= 1e-6);
    CHECK(std::fabs(got.ap_medium - want.ap_medium) <= 1e-6);
    CHECK(std::fabs(got.ap_large - want.ap_large) <= 1e-6);
  }
}

TEST_CASE("average precision is monotone under added hits and order-independent") {
  Rng rng(mix_seed(1717, "eval/properties"));
  EvalConfig cfg;
  int monotone_trials = 0;
  for (int inst = 0; inst < 30; ++inst) {
    CAPTURE(inst);
    Instance in = random_instance(rng);
    auto base = compute_ap(in.dets, in.ds, cfg);

    // Adding a top-scored perfect detection for a ground truth that nothing
    // matched can only help.
    const CocoAnnotation* open_gt = nullptr;
    for (const auto& a : in.ds.annotations) {
      bool matched = false;
      for (const auto& dd : in.dets)
        if (dd.image_id == a.image_id && dd.category_id == a.category_id &&
            iou(dd.box, a.box) >= 0.5)
          matched = true;
      if (!matched) {
        open_gt = &a;
        break;
      }
    }
    if (open_gt) {
      ++monotone_trials;
      auto plus = in.dets;
      plus.push_back(det(open_gt->image_id, open_gt->category_id, open_gt->box, 2.0));
      auto grown = compute_ap(plus, in.ds, cfg);
      CHECK(grown.ap >= base.ap - 1e-12);
      CHECK(grown.ap50 >= base.ap50 - 1e-12);
    }

    // Distinct scores pin a unique processing order, so shuffling the input
    // list changes nothing.
    auto shuffled = in.dets;
    for (size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.uniform_int(static_cast<uint64_t>(i))]);
    auto perm = compute_ap(shuffled, in.ds, cfg);
    CHECK(perm.ap == base.ap);
    CHECK(perm.ap50 == base.ap50);
    CHECK(perm.ap75 == base.ap75);
    CHECK(perm.ap_small == base.ap_small);
    CHECK(perm.ap_medium == base.ap_medium);
    CHECK(perm.ap_large == base.ap_large);
  }
  CHECK(monotone_trials >= 10);
}

TEST_CASE("error classification follows the bucket order with inclusive boundaries") {
  std::vector<GtObject> gt = {{Box{0, 0, 10, 10}, 1}};

  CHECK(classify_error(Box{0, 0, 10, 10}, 1, gt) == ErrorType::Correct);
  CHECK(classify_error(Box{0, 0, 10, 5}, 1, gt) == ErrorType::Correct);     // IoU exactly 0.5
  CHECK(classify_error(Box{0, 0, 10, 1}, 1, gt) == ErrorType::Location);    // IoU exactly 0.1
  CHECK(classify_error(Box{0, 0, 10, 5}, 2, gt) == ErrorType::Classification);
  CHECK(classify_error(Box{0, 0, 10, 1}, 2, gt) == ErrorType::Other);
  CHECK(classify_error(Box{0, 0, 10, 0.999}, 1, gt) == ErrorType::Background);
  CHECK(classify_error(Box{50, 50, 60, 60}, 1, gt) == ErrorType::Background);
  CHECK(classify_error(Box{0, 0, 10, 10}, 1, {}) == ErrorType::Background);

  // The same-class rules run first: a moderate same-class overlap beats a
  // perfect wrong-class one.
  std::vector<GtObject> two = {{Box{0, 0, 10, 10}, 1}, {Box{0, 0, 20, 20}, 2}};
  CHECK(classify_error(Box{0, 0, 20, 20}, 1, two) == ErrorType::Location);
  CHECK(classify_error(Box{0, 0, 10, 10}, 3, two) == ErrorType::Classification);

  for (int k = 0; k < kNumErrorTypes; ++k)
    CHECK(std::string(error_type_name(static_cast<ErrorType>(k))).size() > 0);
}

TEST_CASE("error breakdown on a hand-enumerated twenty-prediction set") {
  CocoDataset ds;
  ds.images = {{1, "im1", 96, 96}, {2, "im2", 96, 96}};
  ds.categories = {{1, "alpha"}, {2, "beta"}, {3, "gamma"}, {4, "delta"}};
  ds.annotations = {
      {1, 1, 1, Box{10, 10, 30, 30}},  // alpha
      {2, 1, 1, Box{50, 50, 80, 80}},  // alpha
      {3, 1, 2, Box{10, 60, 26, 76}},  // beta
      {4, 2, 1, Box{20, 20, 40, 40}},  // alpha
      {5, 2, 2, Box{60, 10, 90, 40}},  // beta
      {6, 2, 4, Box{5, 5, 15, 15}},    // delta
      {7, 2, 2, Box{40, 60, 56, 76}},  // beta
  };

  std::vector<DetectionRecord> dets = {
      // alpha: three used (Correct at IoU exactly 0.5, Location, Background),
      // five surplus, including an exact copy of a ground truth box.
      det(1, 1, Box{10, 10, 30, 20}, 0.95),
      det(2, 1, Box{28, 28, 48, 48}, 0.90),
      det(1, 1, Box{70, 10, 90, 30}, 0.85),
      det(1, 1, Box{50, 50, 80, 80}, 0.80),
      det(1, 1, Box{0, 0, 5, 5}, 0.75),
      det(2, 1, Box{0, 0, 5, 5}, 0.70),
      det(1, 1, Box{90, 90, 95, 95}, 0.65),
      det(2, 1, Box{90, 90, 95, 95}, 0.60),
      // beta: three used (Correct, Classification, Other), four surplus.
      det(1, 2, Box{10, 60, 26, 76}, 0.92),
      det(1, 2, Box{50, 50, 80, 80}, 0.88),
      det(2, 2, Box{30, 30, 50, 50}, 0.84),
      det(1, 2, Box{0, 50, 10, 60}, 0.80),
      det(2, 2, Box{70, 70, 80, 80}, 0.76),
      det(1, 2, Box{30, 0, 40, 10}, 0.72),
      det(2, 2, Box{0, 80, 10, 90}, 0.68),
      // gamma has no ground truth: all three ignored.
      det(1, 3, Box{20, 20, 40, 40}, 0.90),
      det(2, 3, Box{20, 20, 40, 40}, 0.80),
      det(1, 3, Box{60, 60, 70, 70}, 0.70),
      // delta: one used (Background); the perfect hit is outranked and dropped.
      det(1, 4, Box{80, 85, 95, 95}, 0.90),
      det(2, 4, Box{5, 5, 15, 15}, 0.50),
  };
  REQUIRE(dets.size() == 20);

  // Feed them out of order; selection must re-rank by score.
  std::vector<DetectionRecord> scrambled;
  for (size_t i = 0; i < dets.size(); ++i) scrambled.push_back(dets[(i * 7 + 3) % dets.size()]);

  auto b = error_breakdown(scrambled, ds);
  REQUIRE(b.per_category.size() == 4);

  const auto& alpha = b.per_category[0];
  CHECK(alpha.name == "alpha");
  CHECK(alpha.n_gt == 3);
  CHECK(alpha.n_used == 3);
  CHECK(alpha.counts == std::array<int, 5>{1, 1, 0, 0, 1});
  CHECK(alpha.pct[0] == doctest::Approx(100.0 / 3).epsilon(1e-12));

  const auto& beta = b.per_category[1];
  CHECK(beta.n_gt == 3);
  CHECK(beta.counts == std::array<int, 5>{1, 0, 1, 1, 0});

  const auto& gamma = b.per_category[2];
  CHECK(gamma.n_gt == 0);
  CHECK(gamma.n_used == 0);
  CHECK(gamma.counts == std::array<int, 5>{0, 0, 0, 0, 0});

  const auto& delta = b.per_category[3];
  CHECK(delta.n_gt == 1);
  CHECK(delta.n_used == 1);
  CHECK(delta.counts == std::array<int, 5>{0, 0, 0, 0, 1});
  CHECK(delta.pct[4] == 100.0);

  CHECK(b.categories_in_macro == 3);
  CHECK(b.macro_pct[0] == doctest::Approx(200.0 / 9).epsilon(1e-12));
  CHECK(b.macro_pct[1] == doctest::Approx(100.0 / 9).epsilon(1e-12));
  CHECK(b.macro_pct[2] == doctest::Approx(100.0 / 9).epsilon(1e-12));
  CHECK(b.macro_pct[3] == doctest::Approx(100.0 / 9).epsilon(1e-12));
  CHECK(b.macro_pct[4] == doctest::Approx(400.0 / 9).epsilon(1e-12));

  for (const auto& ce : b.per_category) {
    if (ce.n_used == 0) continue;
    double sum = 0.0;
    for (double p : ce.pct) sum += p;
    CHECK(std::fabs(sum - 100.0) <= 1e-9);
  }
  double macro_sum = 0.0;
  for (double p : b.macro_pct) macro_sum += p;
  CHECK(std::fabs(macro_sum - 100.0) <= 1e-9);

  SUBCASE("unknown ids are rejected") {
    auto bad = scrambled;
    bad.push_back(det(42, 1, Box{0, 0, 5, 5}, 0.1));
    CHECK_THROWS_WITH_AS(error_breakdown(bad, ds), doctest::Contains("unknown image_id 42"),
                         std::runtime_error);
  }
}

TEST_CASE("breakdown rendering is deterministic and complete") {
  CocoDataset ds;
  ds.images = {{1, "im1", 96, 96}, {2, "im2", 96, 96}};
  ds.categories = {{1, "alpha"}, {2, "beta"}, {3, "gamma"}, {4, "delta"}};
  ds.annotations = {
      {1, 1, 1, Box{10, 10, 30, 30}}, {2, 1, 1, Box{50, 50, 80, 80}},
      {3, 1, 2, Box{10, 60, 26, 76}}, {4, 2, 1, Box{20, 20, 40, 40}},
      {5, 2, 2, Box{60, 10, 90, 40}}, {6, 2, 4, Box{5, 5, 15, 15}},
      {7, 2, 2, Box{40, 60, 56, 76}},
  };
  std::vector<DetectionRecord> dets = {
      det(1, 1, Box{10, 10, 30, 20}, 0.95), det(2, 1, Box{28, 28, 48, 48}, 0.90),
      det(1, 1, Box{70, 10, 90, 30}, 0.85), det(1, 2, Box{10, 60, 26, 76}, 0.92),
      det(1, 2, Box{50, 50, 80, 80}, 0.88), det(2, 2, Box{30, 30, 50, 50}, 0.84),
      det(1, 4, Box{80, 85, 95, 95}, 0.90),
  };
  auto b = error_breakdown(dets, ds);

  TempDir tmp;
  std::string csv_path = (tmp.path / "breakdown.csv").string();
  std::string svg_path = (tmp.path / "breakdown.svg").string();
  render_breakdown(b, csv_path, svg_path);

  std::string expected_csv =
      "category,n_gt,n_used,correct_pct,location_pct,classification_pct,"
      "other_pct,background_pct\n"
      "alpha,3,3,33.3333,33.3333,0.0000,0.0000,33.3333\n"
      "beta,3,3,33.3333,0.0000,33.3333,33.3333,0.0000\n"
      "gamma,0,0,0.0000,0.0000,0.0000,0.0000,0.0000\n"
      "delta,1,1,0.0000,0.0000,0.0000,0.0000,100.0000\n"
      "all,7,7,22.2222,11.1111,11.1111,11.1111,44.4444\n";
  CHECK(slurp(csv_path) == expected_csv);

  std::string svg = slurp(svg_path);
  CHECK(svg.find("<svg") == 0);
  CHECK(count_occurrences(svg, "<rect") == 1 + 5 + 5 * 5);
  for (const char* label : {"alpha", "beta", "gamma", "delta", "all", "correct", "location",
                            "classification", "other", "background"})
    CHECK(svg.find(label) != std::string::npos);
  CHECK(svg.find("#4daf4a") != std::string::npos);

  std::string csv2 = (tmp.path / "b2.csv").string();
  std::string svg2 = (tmp.path / "b2.svg").string();
  render_breakdown(b, csv2, svg2);
  CHECK(slurp(csv2) == slurp(csv_path));
  CHECK(slurp(svg2) == svg);
}
