#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hce/detector.hpp"
#include "hce/model.hpp"
#include "hce/synth_data.hpp"

namespace hce {

// Everything a run needs, assembled from flat key=value files (with
// `include other.cfg` lines) or from a named preset. Later keys override
// earlier ones, unknown keys are errors, and cross-field rules are enforced
// at parse time.
struct RunConfig {
  // dataset
  std::string data_dir = "data";
  std::uint64_t data_seed = 0;
  int train_images = 2000;
  int val_images = 500;
  int image_height = 96;
  int image_width = 96;
  int num_classes = 10;
  int num_context_pairs = 3;
  int objects_min = 1;
  int objects_max = 4;
  int glyph_min = 16;
  int glyph_max = 28;
  double noise_level = 0.25;

  // model
  std::vector<int> widths = {16, 32, 48, 64};
  int head_hidden = 128;
  bool top_down = true;
  bool mll = false;       // image-level categorical embedding + its loss
  bool instance = false;  // instance-level contextual features (requires mll)
  bool global = false;    // whole-image context merged in (requires instance)
  bool ff_train = true;   // fuse context into the feature path during training
  bool cf_train = false;  // train the added-confidence path as well
  bool ff_test = true;    // evaluate the feature-fusion branch
  bool cf_test = false;   // evaluate the confidence-fusion branch

  // proposals
  std::string proposal_source = "gt_jitter";  // or "rpn_lite"

  // optimizer
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int warmup_steps = 300;
  int epochs = 8;
  int batch_size = 8;

  // inference
  double score_thresh = 0.05;
  std::string cf_box_source = "fusion";  // boxes for the confidence branch: fusion | fpn

  // bookkeeping
  std::uint64_t seed = 1;
  int checkpoint_every = 1000;

  void validate() const;  // throws std::invalid_argument with the broken rule
};

// Parses a config file, following includes relative to the including file.
RunConfig load_run_config(const std::string& path);

// Parses config text directly (same grammar, no includes resolvable).
RunConfig parse_run_config(const std::string& text, const std::string& label = "<inline>");

bool is_preset(const std::string& name);
std::vector<std::string> preset_names();
RunConfig preset_config(const std::string& name);

// A path to an existing file, else a preset name, else an error naming both
// interpretations.
RunConfig resolve_config(const std::string& arg);

// Stable full serialization, one key=value per line in declaration order.
std::string canonical(const RunConfig& cfg);

// Hash over the architecture-determining subset (widths, head size, context
// flags, class count, proposal machinery). Checkpoints carry it so a load
// into a differently shaped model fails loudly.
std::uint64_t model_hash(const RunConfig& cfg);

ModelSpec model_spec(const RunConfig& cfg);
SceneConfig scene_config(const RunConfig& cfg);
SgdConfig sgd_config(const RunConfig& cfg, int total_steps);
InferenceFlags inference_flags(const RunConfig& cfg);

}  // namespace hce
