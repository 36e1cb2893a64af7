#include <benchmark/benchmark.h>

#include <vector>

#include "hce/config.hpp"
#include "hce/detector.hpp"
#include "hce/model.hpp"
#include "hce/roi_ops.hpp"
#include "hce/rng.hpp"
#include "hce/synth_data.hpp"

namespace {

hce::ModelSpec bench_spec() {
  hce::ModelSpec s;
  s.widths = {16, 32, 48, 64};
  s.num_classes = 10;
  s.head_hidden = 128;
  s.use_mll = true;
  s.use_instance = true;
  s.use_global = true;
  return s;
}

hce::SceneConfig bench_scene() {
  hce::SceneConfig c;
  c.seed = 42;
  return c;
}

std::vector<hce::Box> random_boxes(int n, double img, hce::Rng& rng) {
  std::vector<hce::Box> out;
  for (int i = 0; i < n; ++i) {
    double x1 = rng.uniform(0.0, img - 8.0), y1 = rng.uniform(0.0, img - 8.0);
    out.push_back({x1, y1, x1 + rng.uniform(6.0, img - x1 - 1.0),
                   y1 + rng.uniform(6.0, img - y1 - 1.0)});
  }
  return out;
}

void BM_RoiAlign(benchmark::State& state) {
  hce::Rng rng(1, "bench/roi");
  hce::FeatureMap<float> map;
  map.data = hce::Tensor<float>({64, 24, 24});
  map.stride = 4.0;
  for (auto& v : map.data.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto boxes = random_boxes(64, 96.0, rng);
  for (auto _ : state) {
    for (const auto& b : boxes) benchmark::DoNotOptimize(hce::roi_align(map, b));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(boxes.size()));
}
BENCHMARK(BM_RoiAlign);

void BM_Nms(benchmark::State& state) {
  hce::Rng rng(2, "bench/nms");
  auto boxes = random_boxes(static_cast<int>(state.range(0)), 96.0, rng);
  std::vector<double> scores;
  for (std::size_t i = 0; i < boxes.size(); ++i) scores.push_back(rng.uniform(0.0, 1.0));
  for (auto _ : state) benchmark::DoNotOptimize(hce::nms(boxes, scores, 0.5));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Nms)->Arg(100)->Arg(300);

void BM_BackboneForward(benchmark::State& state) {
  auto m = hce::make_model<float>(bench_spec(), 1);
  hce::Rng rng(3, "bench/conv");
  hce::Tensor<float> img({1, 3, 96, 96});
  for (auto& v : img.v) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  for (auto _ : state) {
    hce::ag::Tape<float> t;
    auto B = hce::bind(t, m);
    hce::Pyramid<float> pyr = hce::backbone_forward(t, B, t.leaf(img));
    benchmark::DoNotOptimize(t.val(pyr.top).v.data());
  }
}
BENCHMARK(BM_BackboneForward);

void BM_Inference(benchmark::State& state) {
  auto m = hce::make_model<float>(bench_spec(), 1);
  hce::SceneConfig sc = bench_scene();
  hce::AnnotatedImage im = hce::generate_scene(sc, 0);
  std::vector<hce::Box> gt;
  for (const auto& inst : im.instances) gt.push_back(inst.box);
  hce::ProposalConfig pc;
  hce::Rng rng(4, "bench/prop");
  hce::ProposalSet props = hce::propose_gt_jitter(gt, sc.width, sc.height, pc, rng);
  hce::InferenceFlags fl;
  fl.use_ff = true;
  fl.use_cf = state.range(0) == 1;
  for (auto _ : state)
    benchmark::DoNotOptimize(hce::run_inference(m, im.pixels, props.boxes, fl));
}
BENCHMARK(BM_Inference)->Arg(0)->Arg(1);  // feature fusion only, then both branches

void BM_TrainStep(benchmark::State& state) {
  hce::RunConfig cfg;
  cfg.mll = cfg.instance = cfg.global = true;
  cfg.cf_train = cfg.cf_test = true;
  auto m = hce::make_model<float>(hce::model_spec(cfg), 1);
  hce::Sgd<float> opt;
  opt.cfg = hce::sgd_config(cfg, 1000);
  hce::SceneConfig sc = bench_scene();
  std::vector<hce::AnnotatedImage> imgs;
  for (int i = 0; i < 2; ++i) imgs.push_back(hce::generate_scene(sc, i));
  std::vector<const hce::AnnotatedImage*> batch;
  for (const auto& im : imgs) batch.push_back(&im);
  hce::TrainStepConfig tc;
  long long step = 0;
  for (auto _ : state) {
    hce::Rng rng(hce::mix_seed(7, "bench/step/" + std::to_string(step++)));
    benchmark::DoNotOptimize(hce::train_step(m, batch, tc, opt, rng));
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
