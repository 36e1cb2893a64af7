#include "hce/synth_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "hce/rng.hpp"

namespace fs = std::filesystem;

namespace hce {

namespace {

constexpr float kBackdrop = 0.5f;     // box interior behind the glyph
constexpr float kBase = 0.25f;        // background outside boxes
constexpr float kStripeAmp = 0.35f;   // context texture amplitude
constexpr int kStripePeriod = 6;      // pixels per stripe band
constexpr int kStripeHalo = 6;        // stripe-free ring around each box
constexpr int kEdgeMargin = 2;        // min distance box-to-border
constexpr int kBoxGap = 3;            // min distance box-to-box
constexpr float kNoiseAmp = 0.15f;    // scaled by noise_level
constexpr int kMaxShapes = 32;

constexpr float kPalette[8][3] = {
    {0.90f, 0.10f, 0.10f}, {0.10f, 0.85f, 0.15f}, {0.15f, 0.25f, 0.95f},
    {0.95f, 0.85f, 0.10f}, {0.85f, 0.15f, 0.90f}, {0.10f, 0.85f, 0.85f},
    {0.95f, 0.55f, 0.10f}, {0.60f, 0.35f, 0.90f}};

inline float q255(float v) {
  v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<float>(std::lround(v * 255.f)) / 255.f;
}

}  // namespace

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("SceneConfig: " + m); };
  if (height < 64 || width < 64) fail("image size must be at least 64x64");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (num_context_pairs < 0) fail("num_context_pairs must be >= 0");
  if (2 * num_context_pairs > num_classes)
    fail("2 * num_context_pairs must not exceed num_classes");
  if (objects_min < 1) fail("objects_per_image lower bound must be >= 1");
  if (objects_max < objects_min) fail("objects_per_image range is inverted");
  if (glyph_min < 6) fail("glyph_size lower bound must be >= 6 pixels");
  if (glyph_max < glyph_min) fail("glyph_size range is inverted");
  if (glyph_max + 2 * kEdgeMargin > std::min(height, width))
    fail("glyph_size upper bound does not fit in the image");
  if (noise_level < 0.0 || noise_level > 1.0) fail("noise_level must be in [0, 1]");
  if (num_classes - num_context_pairs > kMaxShapes)
    fail("needs more distinct glyphs than the catalog provides");
}

std::string SceneConfig::canonical() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "h=%d;w=%d;c=%d;pairs=%d;obj=%d..%d;glyph=%d..%d;noise=%.17g;seed=%llu", height,
                width, num_classes, num_context_pairs, objects_min, objects_max, glyph_min,
                glyph_max, noise_level, static_cast<unsigned long long>(seed));
  return buf;
}

std::vector<int> image_level_targets(const std::vector<int>& categories, int C) {
  std::vector<int> y(static_cast<std::size_t>(C), 0);
  for (int c : categories) {
    if (c < 0 || c >= C)
      throw std::invalid_argument("image_level_targets: category " + std::to_string(c) +
                                  " outside [0, " + std::to_string(C) + ")");
    y[static_cast<std::size_t>(c)] = 1;
  }
  return y;
}

Tensor<float> render_glyph(int shape_id, int size) {
  if (shape_id < 0 || shape_id >= kMaxShapes)
    throw std::invalid_argument("render_glyph: shape_id out of range");
  if (size < 1) throw std::invalid_argument("render_glyph: size must be positive");
  const int color_idx = shape_id % 8;
  const int prim = (shape_id / 2) % 4;
  const float scale = 1.0f - 0.2f * static_cast<float>(shape_id / 8);
  Tensor<float> g({3, size, size}, kBackdrop);
  for (int yy = 0; yy < size; ++yy)
    for (int xx = 0; xx < size; ++xx) {
      float u = (static_cast<float>(xx) + 0.5f) / static_cast<float>(size) - 0.5f;
      float v = (static_cast<float>(yy) + 0.5f) / static_cast<float>(size) - 0.5f;
      float r = std::sqrt(u * u + v * v);
      bool in = false;
      switch (prim) {
        case 0: in = r <= 0.36f * scale; break;
        case 1: in = r >= 0.20f * scale && r <= 0.38f * scale; break;
        case 2: in = std::abs(u) <= 0.13f * scale || std::abs(v) <= 0.13f * scale; break;
        default: in = std::abs(u) + std::abs(v) <= 0.42f * scale; break;
      }
      if (in)
        for (int c = 0; c < 3; ++c) g.at(c, yy, xx) = kPalette[color_idx][c];
    }
  for (auto& e : g.v) e = q255(e);
  return g;
}

int glyph_shape_for_class(const SceneConfig& cfg, int category) {
  if (category < 0 || category >= cfg.num_classes)
    throw std::invalid_argument("glyph_shape_for_class: category out of range");
  if (category < 2 * cfg.num_context_pairs) return category / 2;
  return cfg.num_context_pairs + (category - 2 * cfg.num_context_pairs);
}

AnnotatedImage generate_scene(const SceneConfig& cfg, int index) {
  cfg.validate();
  if (index < 0) throw std::invalid_argument("generate_scene: index must be >= 0");
  Rng rng(mix_seed(cfg.seed, "scene#" + std::to_string(index)));
  const int H = cfg.height, W = cfg.width;
  const int target = rng.uniform_int(cfg.objects_min, cfg.objects_max);

  struct Placed {
    int x, y, s, category;
  };
  std::vector<Placed> placed;
  // one stripe signature per color channel; a channel accepts only one
  // (pair, member) combination per image, which also bans pair siblings
  struct Sig {
    int pair = -1, member = -1;
  };
  Sig sig[3];

  for (int obj = 0; obj < target; ++obj) {
    int category = -1;
    for (int attempt = 0; attempt < 64 && category < 0; ++attempt) {
      int c = rng.uniform_int(0, cfg.num_classes - 1);
      if (c < 2 * cfg.num_context_pairs) {
        int p = c / 2, m = c % 2, k = p % 3;
        if (sig[k].pair >= 0 && (sig[k].pair != p || sig[k].member != m)) continue;
      }
      category = c;
    }
    if (category < 0) continue;
    const int s = rng.uniform_int(cfg.glyph_min, cfg.glyph_max);
    int x = 0, y = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 128 && !ok; ++attempt) {
      x = rng.uniform_int(kEdgeMargin, W - s - kEdgeMargin);
      y = rng.uniform_int(kEdgeMargin, H - s - kEdgeMargin);
      ok = true;
      for (const auto& p : placed) {
        bool disjoint = x >= p.x + p.s + kBoxGap || p.x >= x + s + kBoxGap ||
                        y >= p.y + p.s + kBoxGap || p.y >= y + s + kBoxGap;
        if (!disjoint) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) continue;
    placed.push_back({x, y, s, category});
    if (category < 2 * cfg.num_context_pairs)
      sig[(category / 2) % 3] = {category / 2, category % 2};
  }
  if (placed.empty()) throw std::runtime_error("generate_scene: could not place any object");

  Tensor<float> img({3, H, W});
  const double namp = kNoiseAmp * cfg.noise_level;
  for (int yy = 0; yy < H; ++yy)
    for (int xx = 0; xx < W; ++xx) {
      bool inside = false;
      int dist = 1 << 20;  // L-inf distance to the nearest box
      for (const auto& p : placed) {
        int dx = xx < p.x ? p.x - xx : (xx >= p.x + p.s ? xx - (p.x + p.s - 1) : 0);
        int dy = yy < p.y ? p.y - yy : (yy >= p.y + p.s ? yy - (p.y + p.s - 1) : 0);
        if (dx == 0 && dy == 0) {
          inside = true;
          break;
        }
        dist = std::min(dist, std::max(dx, dy));
      }
      if (inside) continue;  // glyphs are blitted afterwards
      float v[3] = {kBase, kBase, kBase};
      for (int k = 0; k < 3; ++k)
        if (sig[k].pair >= 0 && dist >= kStripeHalo) {
          int coord = sig[k].member == 0 ? yy : xx;
          if ((coord / kStripePeriod) % 2 == 0) v[k] += kStripeAmp;
        }
      for (int k = 0; k < 3; ++k) {
        double n = namp > 0 ? rng.uniform(-namp, namp) : 0.0;
        img.at(k, yy, xx) = q255(static_cast<float>(v[k] + n));
      }
    }

  AnnotatedImage out;
  std::vector<int> cats;
  for (const auto& p : placed) {
    Tensor<float> g = render_glyph(glyph_shape_for_class(cfg, p.category), p.s);
    for (int c = 0; c < 3; ++c)
      for (int yy = 0; yy < p.s; ++yy)
        for (int xx = 0; xx < p.s; ++xx) img.at(c, p.y + yy, p.x + xx) = g.at(c, yy, xx);
    out.instances.push_back({Box{static_cast<double>(p.x), static_cast<double>(p.y),
                                 static_cast<double>(p.x + p.s), static_cast<double>(p.y + p.s)},
                             p.category});
    cats.push_back(p.category);
  }
  out.pixels = std::move(img);
  out.y = image_level_targets(cats, cfg.num_classes);
  return out;
}

std::string config_hash(const SceneConfig& cfg, int n_images) {
  std::uint64_t h = fnv1a(cfg.canonical() + ";n=" + std::to_string(n_images));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

static std::string category_name(const SceneConfig& cfg, int c) {
  if (c < 2 * cfg.num_context_pairs)
    return "pair" + std::to_string(c / 2) + (c % 2 ? "b" : "a");
  return "solo" + std::to_string(c - 2 * cfg.num_context_pairs);
}

DatasetManifest write_dataset(const SceneConfig& cfg, int n_images, const std::string& split,
                              const std::string& out_dir) {
  cfg.validate();
  if (n_images < 1) throw std::invalid_argument("write_dataset: n_images must be >= 1");
  fs::create_directories(out_dir);
  const std::string hash = config_hash(cfg, n_images);
  const fs::path manifest_path = fs::path(out_dir) / (split + ".manifest.json");
  DatasetManifest m;
  m.split = split;
  m.hash = hash;
  m.seed = cfg.seed;
  m.n_images = n_images;
  m.num_classes = cfg.num_classes;
  m.annotations_path = (fs::path(out_dir) / (split + ".json")).string();
  m.image_dir = (fs::path(out_dir) / split).string();

  if (fs::exists(manifest_path)) {
    std::ifstream f(manifest_path);
    nlohmann::json j = nlohmann::json::parse(f);
    std::string old = j.value("config_hash", std::string());
    if (old != hash)
      throw std::runtime_error("write_dataset: split '" + split + "' in " + out_dir +
                               " was generated from a different config (hash " + old + " vs " +
                               hash + "); delete it or pick another out dir");
    m.already_existed = true;
    return m;
  }

  fs::create_directories(m.image_dir);
  CocoDataset ds;
  int ann_id = 0;
  for (int i = 0; i < n_images; ++i) {
    AnnotatedImage scene = generate_scene(cfg, i);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06d.ppm", i);
    write_ppm((fs::path(m.image_dir) / name).string(), scene.pixels);
    ds.images.push_back({i, name, cfg.width, cfg.height});
    for (const auto& inst : scene.instances)
      ds.annotations.push_back({ann_id++, i, inst.category, inst.box});
  }
  for (int c = 0; c < cfg.num_classes; ++c) ds.categories.push_back({c, category_name(cfg, c)});
  write_coco(m.annotations_path, ds);

  nlohmann::json j;
  j["split"] = split;
  j["config_hash"] = hash;
  j["seed"] = cfg.seed;
  j["n_images"] = n_images;
  j["num_classes"] = cfg.num_classes;
  std::ofstream f(manifest_path);
  if (!f) throw std::runtime_error("write_dataset: cannot open " + manifest_path.string());
  f << j.dump(1) << "\n";
  return m;
}

DatasetManifest read_manifest(const std::string& out_dir, const std::string& split) {
  const fs::path manifest_path = fs::path(out_dir) / (split + ".manifest.json");
  std::ifstream f(manifest_path);
  if (!f)
    throw std::runtime_error("read_manifest: no manifest at " + manifest_path.string() +
                             " (run gen-data first)");
  nlohmann::json j = nlohmann::json::parse(f);
  DatasetManifest m;
  m.split = j.at("split");
  m.hash = j.at("config_hash");
  m.seed = j.at("seed");
  m.n_images = j.at("n_images");
  m.num_classes = j.at("num_classes");
  m.already_existed = true;
  m.annotations_path = (fs::path(out_dir) / (split + ".json")).string();
  m.image_dir = (fs::path(out_dir) / split).string();
  return m;
}

std::vector<AnnotatedImage> load_dataset(const std::string& out_dir, const std::string& split) {
  DatasetManifest m = read_manifest(out_dir, split);
  CocoDataset ds = load_coco(m.annotations_path);
  std::map<int, std::vector<const CocoAnnotation*>> by_image;
  for (const auto& a : ds.annotations) by_image[a.image_id].push_back(&a);
  std::vector<CocoImage> images = ds.images;
  std::sort(images.begin(), images.end(),
            [](const CocoImage& a, const CocoImage& b) { return a.id < b.id; });
  std::vector<AnnotatedImage> out;
  out.reserve(images.size());
  for (const auto& im : images) {
    AnnotatedImage a;
    a.pixels = read_ppm((fs::path(m.image_dir) / im.file_name).string());
    std::vector<int> cats;
    for (const auto* ann : by_image[im.id]) {
      a.instances.push_back({ann->box, ann->category_id});
      cats.push_back(ann->category_id);
    }
    a.y = image_level_targets(cats, m.num_classes);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace hce
