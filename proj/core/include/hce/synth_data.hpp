#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hce/box.hpp"
#include "hce/coco_io.hpp"
#include "hce/tensor.hpp"

namespace hce {

// Scene recipe for the context-dependent synthetic set. Classes come in two
// kinds: the first 2*num_context_pairs classes form pairs (2k, 2k+1) that
// share one glyph and are told apart only by the background stripe texture;
// the remaining classes get their own distinct glyphs.
struct SceneConfig {
  int height = 96;
  int width = 96;
  int num_classes = 10;
  int num_context_pairs = 3;
  int objects_min = 1;
  int objects_max = 4;
  int glyph_min = 16;
  int glyph_max = 28;
  double noise_level = 0.25;
  std::uint64_t seed = 0;

  void validate() const;      // throws std::invalid_argument with the broken rule
  std::string canonical() const;  // stable key=value string, hashed for manifests
};

struct Instance {
  Box box;
  int category = 0;
};

struct AnnotatedImage {
  Tensor<float> pixels;            // (3, H, W), values on the 1/255 grid
  std::vector<Instance> instances;
  std::vector<int> y;              // image-level multi-label targets, length C
};

// y[c] = 1 iff c appears in categories; throws on out-of-range categories.
std::vector<int> image_level_targets(const std::vector<int>& categories, int C);

// Deterministic glyph cell: 0.5 backdrop plus a colored primitive. Depends
// only on (shape_id, size) so paired classes can share it exactly.
Tensor<float> render_glyph(int shape_id, int size);

int glyph_shape_for_class(const SceneConfig& cfg, int category);

// Pure function of (cfg, index); bit-identical across calls.
AnnotatedImage generate_scene(const SceneConfig& cfg, int index);

std::string config_hash(const SceneConfig& cfg, int n_images);

struct DatasetManifest {
  std::string split;
  std::string hash;
  std::uint64_t seed = 0;
  int n_images = 0;
  int num_classes = 0;
  bool already_existed = false;
  std::string annotations_path;
  std::string image_dir;
};

// Renders a split to out_dir: PPM images under out_dir/<split>/, annotations
// at out_dir/<split>.json, manifest at out_dir/<split>.manifest.json.
// A pre-existing split with the same hash is left untouched; a different
// hash is an error.
DatasetManifest write_dataset(const SceneConfig& cfg, int n_images, const std::string& split,
                              const std::string& out_dir);

// Reads a written split back (pixels, boxes, labels), ordered by image id.
std::vector<AnnotatedImage> load_dataset(const std::string& out_dir, const std::string& split);

// Manifest of an existing split, or throws if absent.
DatasetManifest read_manifest(const std::string& out_dir, const std::string& split);

}  // namespace hce
