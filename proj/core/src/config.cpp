#include "hce/config.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hce/rng.hpp"

namespace hce {

namespace {

namespace fs = std::filesystem;

struct Where {
  std::string file;
  int line = 0;
  std::string at() const { return file + ":" + std::to_string(line); }
};

[[noreturn]] void bad(const Where& w, const std::string& msg) {
  throw std::invalid_argument("config " + w.at() + ": " + msg);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool to_bool(const std::string& v, const Where& w, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(w, key + ": expected true/false, got '" + v + "'");
}

long long to_ll(const std::string& v, const Where& w, const std::string& key) {
  try {
    size_t used = 0;
    long long r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    bad(w, key + ": expected an integer, got '" + v + "'");
  }
}

int to_int(const std::string& v, const Where& w, const std::string& key) {
  return static_cast<int>(to_ll(v, w, key));
}

std::uint64_t to_u64(const std::string& v, const Where& w, const std::string& key) {
  try {
    size_t used = 0;
    std::uint64_t r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    bad(w, key + ": expected a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& v, const Where& w, const std::string& key) {
  try {
    size_t used = 0;
    double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    bad(w, key + ": expected a number, got '" + v + "'");
  }
}

std::vector<int> to_int_list(const std::string& v, const Where& w, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(to_int(trim(part), w, key));
  if (out.empty()) bad(w, key + ": expected a comma-separated integer list");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const Where&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto S = [&](const char* key, Setter fn) { t[key] = std::move(fn); };
#define STR_KEY(name) \
  S(#name, [](RunConfig& c, const std::string& v, const Where&) { c.name = v; })
#define INT_KEY(name) \
  S(#name, [](RunConfig& c, const std::string& v, const Where& w) { c.name = to_int(v, w, #name); })
#define U64_KEY(name) \
  S(#name, [](RunConfig& c, const std::string& v, const Where& w) { c.name = to_u64(v, w, #name); })
#define DBL_KEY(name)                                \
  S(#name, [](RunConfig& c, const std::string& v,    \
              const Where& w) { c.name = to_double(v, w, #name); })
#define BOOL_KEY(name) \
  S(#name, [](RunConfig& c, const std::string& v, const Where& w) { c.name = to_bool(v, w, #name); })
    STR_KEY(data_dir);
    U64_KEY(data_seed);
    INT_KEY(train_images);
    INT_KEY(val_images);
    INT_KEY(image_height);
    INT_KEY(image_width);
    INT_KEY(num_classes);
    INT_KEY(num_context_pairs);
    INT_KEY(objects_min);
    INT_KEY(objects_max);
    INT_KEY(glyph_min);
    INT_KEY(glyph_max);
    DBL_KEY(noise_level);
    S("widths", [](RunConfig& c, const std::string& v, const Where& w) {
      c.widths = to_int_list(v, w, "widths");
    });
    INT_KEY(head_hidden);
    BOOL_KEY(top_down);
    BOOL_KEY(mll);
    BOOL_KEY(instance);
    BOOL_KEY(global);
    BOOL_KEY(ff_train);
    BOOL_KEY(cf_train);
    BOOL_KEY(ff_test);
    BOOL_KEY(cf_test);
    STR_KEY(proposal_source);
    DBL_KEY(lr);
    DBL_KEY(momentum);
    DBL_KEY(weight_decay);
    INT_KEY(warmup_steps);
    INT_KEY(epochs);
    INT_KEY(batch_size);
    DBL_KEY(score_thresh);
    STR_KEY(cf_box_source);
    U64_KEY(seed);
    INT_KEY(checkpoint_every);
#undef STR_KEY
#undef INT_KEY
#undef U64_KEY
#undef DBL_KEY
#undef BOOL_KEY
    return t;
  }();
  return table;
}

void apply_line(RunConfig& cfg, const std::string& raw, const Where& w) {
  size_t eq = raw.find('=');
  if (eq == std::string::npos) bad(w, "expected 'key = value', got '" + raw + "'");
  std::string key = trim(raw.substr(0, eq));
  std::string value = trim(raw.substr(eq + 1));
  if (key.empty()) bad(w, "empty key");
  auto it = setters().find(key);
  if (it == setters().end()) bad(w, "unknown key '" + key + "'");
  it->second(cfg, value, w);
}

void parse_stream(RunConfig& cfg, std::istream& in, const std::string& label,
                  std::set<std::string>* visited, const fs::path* base_dir) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    Where w{label, lineno};
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include ", 0) == 0 || line == "include") {
      std::string target = trim(line.substr(7));
      if (target.empty()) bad(w, "include needs a path");
      if (!base_dir) bad(w, "include is not available for inline config text");
      fs::path p = fs::path(target).is_absolute() ? fs::path(target) : *base_dir / target;
      std::string canon = fs::weakly_canonical(p).string();
      if (!visited->insert(canon).second) bad(w, "include cycle through '" + target + "'");
      if (!fs::is_regular_file(p)) bad(w, "include '" + p.string() + "' is not a regular file");
      std::ifstream f(p);
      if (!f) bad(w, "cannot open include '" + p.string() + "'");
      fs::path sub_dir = p.parent_path();
      parse_stream(cfg, f, p.string(), visited, &sub_dir);
      continue;
    }
    apply_line(cfg, line, w);
  }
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (instance && !mll)
    fail("instance=true requires mll=true (the context stages stack cumulatively)");
  if (global && !instance)
    fail("global=true requires instance=true (the context stages stack cumulatively)");
  if (cf_train && !instance) fail("cf_train=true requires instance=true (no context branch to fuse)");
  if (cf_test && !instance) fail("cf_test=true requires instance=true (no context branch to fuse)");
  scene_config(*this).validate();
  if (train_images < 1 || val_images < 1) fail("train_images and val_images must be positive");
  model_spec(*this).validate();
  if (!ff_test && !cf_test) fail("at least one of ff_test/cf_test must be true");
  if (proposal_source != "gt_jitter" && proposal_source != "rpn_lite")
    fail("proposal_source must be gt_jitter or rpn_lite, got '" + proposal_source + "'");
  if (cf_box_source != "fusion" && cf_box_source != "fpn")
    fail("cf_box_source must be fusion or fpn, got '" + cf_box_source + "'");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (warmup_steps < 0) fail("warmup_steps must be non-negative");
  if (epochs < 1) fail("epochs must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (score_thresh < 0.0 || score_thresh >= 1.0) fail("score_thresh must lie in [0, 1)");
  if (checkpoint_every < 1) fail("checkpoint_every must be positive");
}

RunConfig load_run_config(const std::string& path) {
  // An ifstream on a directory opens fine but yields no lines, which would
  // silently parse as an all-defaults config; reject anything but a file.
  if (!fs::is_regular_file(path))
    throw std::invalid_argument("config: '" + path + "' is not a regular file");
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open '" + path + "'");
  RunConfig cfg;
  std::set<std::string> visited{fs::weakly_canonical(path).string()};
  fs::path base = fs::path(path).parent_path();
  parse_stream(cfg, f, path, &visited, &base);
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config(const std::string& text, const std::string& label) {
  RunConfig cfg;
  std::istringstream in(text);
  parse_stream(cfg, in, label, nullptr, nullptr);
  cfg.validate();
  return cfg;
}

namespace {

// The ablation grid. Rows build cumulatively; the last embedding row turns
// the confidence branch on as well, matching the complete method.
RunConfig make_preset(const std::string& name) {
  RunConfig c;
  auto full_context = [&] { c.mll = c.instance = c.global = true; };
  auto both_fusion = [&] {
    c.cf_train = true;
    c.cf_test = true;
  };
  if (name == "table2_row1") {
    // baseline detector
  } else if (name == "table2_row2") {
    c.mll = true;
  } else if (name == "table2_row3") {
    c.mll = c.instance = true;
  } else if (name == "table2_row4") {
    full_context();
    both_fusion();
  } else if (name == "table3_row1") {
    c.mll = true;  // context off: neither fusion applies
  } else if (name == "table3_row2") {
    full_context();  // feature fusion only
  } else if (name == "table3_row3") {
    full_context();
    c.ff_train = false;
    c.cf_train = true;
    c.ff_test = false;
    c.cf_test = true;
    // Without feature fusion the head learns boxes from plain features, so
    // the confidence branch must decode from the same path.
    c.cf_box_source = "fpn";
  } else if (name == "table3_row4") {
    full_context();
    both_fusion();
  } else if (name == "table4_row1") {
    // baseline detector
  } else if (name == "table4_row2") {
    full_context();
    c.cf_train = true;  // trained with both, tested feature-branch-only
  } else if (name == "table4_row3") {
    full_context();
    c.cf_train = true;
    c.ff_test = false;
    c.cf_test = true;
  } else if (name == "table4_row4") {
    full_context();
    both_fusion();
  } else {
    throw std::invalid_argument("config: unknown preset '" + name + "'");
  }
  c.validate();
  return c;
}

const std::vector<std::string>& all_presets() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (int t = 2; t <= 4; ++t)
      for (int r = 1; r <= 4; ++r)
        v.push_back("table" + std::to_string(t) + "_row" + std::to_string(r));
    return v;
  }();
  return names;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

bool is_preset(const std::string& name) {
  const auto& all = all_presets();
  return std::find(all.begin(), all.end(), name) != all.end();
}

std::vector<std::string> preset_names() { return all_presets(); }

RunConfig preset_config(const std::string& name) { return make_preset(name); }

RunConfig resolve_config(const std::string& arg) {
  // Only a regular file counts as a config path: a directory that happens to
  // share a preset's name (e.g. a run's own output dir) must not shadow it.
  if (fs::is_regular_file(arg)) return load_run_config(arg);
  if (is_preset(arg)) return make_preset(arg);
  std::string all;
  for (const auto& n : all_presets()) all += (all.empty() ? "" : ", ") + n;
  throw std::invalid_argument("config: '" + arg + "' is neither a readable file nor a preset (" +
                              all + ")");
}

std::string canonical(const RunConfig& c) {
  std::ostringstream o;
  o << "data_dir=" << c.data_dir << "\ndata_seed=" << c.data_seed
    << "\ntrain_images=" << c.train_images << "\nval_images=" << c.val_images
    << "\nimage_height=" << c.image_height << "\nimage_width=" << c.image_width
    << "\nnum_classes=" << c.num_classes << "\nnum_context_pairs=" << c.num_context_pairs
    << "\nobjects_min=" << c.objects_min << "\nobjects_max=" << c.objects_max
    << "\nglyph_min=" << c.glyph_min << "\nglyph_max=" << c.glyph_max
    << "\nnoise_level=" << fmt_double(c.noise_level) << "\nwidths=";
  for (size_t i = 0; i < c.widths.size(); ++i) o << (i ? "," : "") << c.widths[i];
  o << "\nhead_hidden=" << c.head_hidden << "\ntop_down=" << (c.top_down ? "true" : "false")
    << "\nmll=" << (c.mll ? "true" : "false") << "\ninstance=" << (c.instance ? "true" : "false")
    << "\nglobal=" << (c.global ? "true" : "false")
    << "\nff_train=" << (c.ff_train ? "true" : "false")
    << "\ncf_train=" << (c.cf_train ? "true" : "false")
    << "\nff_test=" << (c.ff_test ? "true" : "false")
    << "\ncf_test=" << (c.cf_test ? "true" : "false")
    << "\nproposal_source=" << c.proposal_source << "\nlr=" << fmt_double(c.lr)
    << "\nmomentum=" << fmt_double(c.momentum)
    << "\nweight_decay=" << fmt_double(c.weight_decay) << "\nwarmup_steps=" << c.warmup_steps
    << "\nepochs=" << c.epochs << "\nbatch_size=" << c.batch_size
    << "\nscore_thresh=" << fmt_double(c.score_thresh) << "\ncf_box_source=" << c.cf_box_source
    << "\nseed=" << c.seed << "\ncheckpoint_every=" << c.checkpoint_every << "\n";
  return o.str();
}

std::uint64_t model_hash(const RunConfig& c) {
  std::ostringstream o;
  o << "widths=";
  for (size_t i = 0; i < c.widths.size(); ++i) o << (i ? "," : "") << c.widths[i];
  o << ";head_hidden=" << c.head_hidden << ";top_down=" << c.top_down
    << ";num_classes=" << c.num_classes << ";mll=" << c.mll << ";instance=" << c.instance
    << ";global=" << c.global << ";rpn=" << (c.proposal_source == "rpn_lite");
  return fnv1a(o.str());
}

ModelSpec model_spec(const RunConfig& c) {
  ModelSpec s;
  s.widths = c.widths;
  s.num_classes = c.num_classes;
  s.head_hidden = c.head_hidden;
  s.top_down = c.top_down;
  s.use_mll = c.mll;
  s.use_instance = c.instance;
  s.use_global = c.global;
  s.ff_train = c.ff_train;
  s.cf_train = c.cf_train;
  s.with_rpn = c.proposal_source == "rpn_lite";
  return s;
}

SceneConfig scene_config(const RunConfig& c) {
  SceneConfig s;
  s.height = c.image_height;
  s.width = c.image_width;
  s.num_classes = c.num_classes;
  s.num_context_pairs = c.num_context_pairs;
  s.objects_min = c.objects_min;
  s.objects_max = c.objects_max;
  s.glyph_min = c.glyph_min;
  s.glyph_max = c.glyph_max;
  s.noise_level = c.noise_level;
  s.seed = c.data_seed;
  return s;
}

SgdConfig sgd_config(const RunConfig& c, int total_steps) {
  SgdConfig s;
  s.lr = c.lr;
  s.momentum = c.momentum;
  s.weight_decay = c.weight_decay;
  s.warmup_steps = c.warmup_steps;
  s.milestones = schedule_milestones(total_steps);
  return s;
}

InferenceFlags inference_flags(const RunConfig& c) {
  InferenceFlags f;
  f.use_ff = c.ff_test;
  f.use_cf = c.cf_test;
  f.cf_box_source = c.cf_box_source;
  f.score_thresh = c.score_thresh;
  return f;
}

}  // namespace hce
