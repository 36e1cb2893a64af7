#include <CLI11.hpp>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "gradcheck_cmd.hpp"
#include "hce/checkpoint.hpp"
#include "hce/config.hpp"
#include "hce/detector.hpp"
#include "hce/eval.hpp"
#include "hce/train_loop.hpp"

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct CommonArgs {
  std::string config;
  std::string out = "out";
  long long seed = -1;  // negative: keep the config's seed
};

hce::RunConfig resolve(const CommonArgs& a) {
  hce::RunConfig cfg = a.config.empty() ? hce::RunConfig{} : hce::resolve_config(a.config);
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();
  return cfg;
}

std::string data_dir_of(const CommonArgs& a, const hce::RunConfig& cfg) {
  return (fs::path(a.out) / cfg.data_dir).string();
}

// One tag per branch selection; it suffixes every eval/analysis artifact so
// runs of the same model under different test flags sit side by side.
std::string branch_tag(const hce::RunConfig& cfg) {
  if (cfg.ff_test && cfg.cf_test) return "both";
  return cfg.cf_test ? "cf" : "ff";
}

void require_split(const std::string& data_dir, const std::string& split,
                   const hce::SceneConfig& sc, int n_images) {
  hce::DatasetManifest man;
  try {
    man = hce::read_manifest(data_dir, split);
  } catch (const std::exception&) {
    throw std::runtime_error("no '" + split + "' split under " + data_dir +
                             " (run gen-data first)");
  }
  if (man.hash != hce::config_hash(sc, n_images))
    throw std::runtime_error("the '" + split + "' split under " + data_dir +
                             " was generated under a different configuration; rerun gen-data "
                             "into a fresh --out");
}

int cmd_gen_data(const CommonArgs& a) {
  const hce::RunConfig cfg = resolve(a);
  const hce::SceneConfig sc = hce::scene_config(cfg);
  const std::string dir = data_dir_of(a, cfg);
  const std::pair<const char*, int> splits[] = {{"train", cfg.train_images},
                                                {"val", cfg.val_images}};
  for (auto [split, n] : splits) {
    hce::DatasetManifest man = hce::write_dataset(sc, n, split, dir);
    std::printf("%s: %d images of %dx%d, %d classes, hash %s%s\n", split, man.n_images, sc.width,
                sc.height, man.num_classes, man.hash.c_str(),
                man.already_existed ? " (up to date)" : "");
  }
  return 0;
}

void print_param_report(const hce::RunConfig& cfg) {
  auto m = hce::make_model<float>(hce::model_spec(cfg), 1);
  struct Group {
    const char* label;
    const char* prefix;
    std::size_t n = 0;
  };
  Group groups[] = {{"backbone", "backbone.", 0}, {"fpn", "fpn.", 0},
                    {"detection head", "head.", 0}, {"context embedding", "hce.embed", 0},
                    {"image classifier", "hce.fcls", 0}, {"context generator", "hce.ctx", 0},
                    {"rpn", "rpn.", 0}};
  hce::visit_params(m, [&](const std::string& name, hce::Tensor<float>* p) {
    for (Group& g : groups)
      if (name.rfind(g.prefix, 0) == 0) {
        g.n += p->numel();
        break;
      }
  });
  std::printf("model: %zu parameters\n", hce::param_count(m));
  for (const Group& g : groups)
    if (g.n > 0) std::printf("  %-17s %8zu\n", g.label, g.n);
}

int cmd_train(const CommonArgs& a) {
  const hce::RunConfig cfg = resolve(a);
  const std::string dir = data_dir_of(a, cfg);
  require_split(dir, "train", hce::scene_config(cfg), cfg.train_images);
  print_param_report(cfg);

  Clock::time_point last = Clock::now();
  long long last_step = 0;
  auto on_step = [&](const hce::TrainProgress& p) {
    if (p.step % 50 != 0 && p.step != p.total_steps) return;
    const Clock::time_point now = Clock::now();
    const double secs = std::chrono::duration<double>(now - last).count();
    const double per = secs / static_cast<double>(p.step - last_step);
    last = now;
    last_step = p.step;
    std::printf(
        "step %lld/%lld  epoch %d  L_feat %.4f  L_conf %.4f  L_mll %.4f  L_rpn %.4f  "
        "lr %.5f  %.2fs/step\n",
        p.step, p.total_steps, p.epoch, p.losses.feat, p.losses.conf, p.losses.mll, p.losses.rpn,
        p.lr, per);
    std::fflush(stdout);
  };

  hce::TrainOutcome out = hce::run_training(cfg, dir, a.out, on_step);
  if (out.already_complete)
    std::printf("training already complete: %s\n", out.final_checkpoint.c_str());
  else
    std::printf("training complete: %s (%lld steps%s)\n", out.final_checkpoint.c_str(), out.steps,
                out.resumed ? ", resumed" : "");
  return 0;
}

int cmd_eval(const CommonArgs& a) {
  const hce::RunConfig cfg = resolve(a);
  const std::string dir = data_dir_of(a, cfg);
  require_split(dir, "val", hce::scene_config(cfg), cfg.val_images);

  const std::string ckpt = (fs::path(a.out) / "checkpoints" / "final.ckpt").string();
  if (!fs::exists(ckpt))
    throw std::runtime_error("no trained model at " + ckpt + " (run train first)");
  const hce::CheckpointMeta meta = hce::read_checkpoint_meta(ckpt);
  if (meta.config_hash != hce::model_hash(cfg))
    throw std::runtime_error("the checkpoint at " + ckpt +
                             " was trained under a different configuration");
  auto model = hce::make_model<float>(hce::model_spec(cfg), cfg.seed);
  hce::load_checkpoint(ckpt, model, nullptr);

  const hce::CocoDataset coco = hce::load_coco((fs::path(dir) / "val.json").string());
  const std::vector<hce::AnnotatedImage> val = hce::load_dataset(dir, "val");
  if (coco.images.size() != val.size())
    throw std::runtime_error("val annotations and images disagree on the image count");

  hce::ProposalConfig pc;
  pc.source = cfg.proposal_source;
  const hce::InferenceFlags fl = hce::inference_flags(cfg);
  const std::string tag = branch_tag(cfg);
  const bool use_rpn = pc.source == "rpn_lite";

  std::vector<hce::DetectionRecord> records;
  double total_ms = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const hce::AnnotatedImage& im = val[i];
    const int image_id = coco.images[i].id;
    const int H = im.pixels.dim(1), W = im.pixels.dim(2);
    const Clock::time_point t0 = Clock::now();

    hce::ProposalSet props;
    if (use_rpn) {
      hce::ag::Tape<float> t;
      hce::Bound<float> B = hce::bind(t, model);
      hce::Tensor<float> img({1, 3, H, W});
      for (std::size_t j = 0; j < im.pixels.numel(); ++j) img.v[j] = im.pixels.v[j] - 0.5f;
      hce::Pyramid<float> pyr = hce::backbone_forward(t, B, t.leaf(std::move(img)));
      hce::RpnOut<float> rpn = hce::rpn_forward(t, B, pyr);
      props = hce::propose_rpn(t, rpn, 0, static_cast<double>(W), static_cast<double>(H), pc);
    } else {
      std::vector<hce::Box> gt;
      for (const hce::Instance& inst : im.instances) gt.push_back(inst.box);
      hce::Rng rng(hce::mix_seed(cfg.seed, "eval/prop/" + std::to_string(image_id)));
      props = hce::propose_gt_jitter(gt, static_cast<double>(W), static_cast<double>(H), pc, rng);
    }
    const std::vector<hce::Detection> dets = hce::run_inference(model, im.pixels, props.boxes, fl);
    total_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();

    for (const hce::Detection& d : dets)
      records.push_back({image_id, d.category, d.box, d.score, d.branch});
  }

  const fs::path eval_dir = fs::path(a.out) / "eval";
  fs::create_directories(eval_dir);
  hce::write_detections((eval_dir / ("detections_" + tag + ".json")).string(), records);

  const hce::ApSummary s = hce::compute_ap(records, coco, hce::EvalConfig{});
  const double per_image_ms = total_ms / static_cast<double>(val.size());
  nlohmann::ordered_json j = {{"AP", s.ap},          {"AP50", s.ap50},
                              {"AP75", s.ap75},      {"APS", s.ap_small},
                              {"APM", s.ap_medium},  {"APL", s.ap_large},
                              {"per_image_ms", per_image_ms},
                              {"images", val.size()}, {"branch", tag}};
  const std::string metrics_path = (eval_dir / ("metrics_" + tag + ".json")).string();
  std::ofstream(metrics_path) << j.dump(2) << "\n";

  std::printf("branch %s over %zu images: AP %.4f  AP50 %.4f  AP75 %.4f  (%.1f ms/image)\n",
              tag.c_str(), val.size(), s.ap, s.ap50, s.ap75, per_image_ms);
  std::printf("  APS %.4f  APM %.4f  APL %.4f\n", s.ap_small, s.ap_medium, s.ap_large);
  std::printf("wrote %s\n", metrics_path.c_str());
  return 0;
}

int cmd_analyze(const CommonArgs& a) {
  const hce::RunConfig cfg = resolve(a);
  const std::string tag = branch_tag(cfg);
  const std::string det_path =
      (fs::path(a.out) / "eval" / ("detections_" + tag + ".json")).string();
  if (!fs::exists(det_path))
    throw std::runtime_error("no detections at " + det_path + " (run eval first)");
  const std::vector<hce::DetectionRecord> dets = hce::load_detections(det_path);
  const hce::CocoDataset coco =
      hce::load_coco((fs::path(data_dir_of(a, cfg)) / "val.json").string());

  const hce::ErrorBreakdown b = hce::error_breakdown(dets, coco);
  const fs::path out_dir = fs::path(a.out) / "analysis";
  fs::create_directories(out_dir);
  const std::string csv = (out_dir / ("breakdown_" + tag + ".csv")).string();
  const std::string svg = (out_dir / ("breakdown_" + tag + ".svg")).string();
  hce::render_breakdown(b, csv, svg);

  std::printf("error mix over %d categories (top-scoring predictions, percent):\n",
              b.categories_in_macro);
  for (int k = 0; k < hce::kNumErrorTypes; ++k)
    std::printf("  %-14s %7.2f\n", hce::error_type_name(static_cast<hce::ErrorType>(k)),
                b.macro_pct[static_cast<std::size_t>(k)]);
  std::printf("wrote %s and %s\n", csv.c_str(), svg.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"context-embedding detector workbench"};
  app.require_subcommand(1);

  CommonArgs a;
  std::string fault;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "config file or preset name");
    sub->add_option("--seed", a.seed, "override the config's training seed");
    sub->add_option("--out", a.out, "run directory for all artifacts");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "render the synthetic dataset");
  CLI::App* train = app.add_subcommand("train", "train on the rendered dataset");
  CLI::App* eval = app.add_subcommand("eval", "detect on the val split and score it");
  CLI::App* analyze = app.add_subcommand("analyze", "break eval errors down per category");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op");
  for (CLI::App* sub : {gen, train, eval, analyze}) add_common(sub);
  gradcheck->add_option("--seed", a.seed, "seed for the probe inputs");
  gradcheck->add_option("--inject-fault", fault,
                        "corrupt the named op's analytic gradient so its check fails");

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(a);
    if (train->parsed()) return cmd_train(a);
    if (eval->parsed()) return cmd_eval(a);
    if (analyze->parsed()) return cmd_analyze(a);
    if (gradcheck->parsed())
      return run_gradcheck(a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : 1, fault);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
