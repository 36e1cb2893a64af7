#pragma once

#include <functional>
#include <string>

#include "hce/checkpoint.hpp"
#include "hce/config.hpp"
#include "hce/detector.hpp"

namespace hce {

struct TrainProgress {
  long long step = 0;  // 1-based count of completed steps
  int epoch = 0;
  long long total_steps = 0;
  LossBundle losses;
  double lr = 0.0;
  int rois = 0;
};

struct TrainOutcome {
  std::string final_checkpoint;
  long long steps = 0;
  bool resumed = false;
  bool already_complete = false;
};

// Drives the full schedule over a written dataset: per-epoch shuffled
// batches, one optimizer step per batch, a JSONL line per step with all four
// loss terms and the learning rate, periodic checkpoints under
// <out>/checkpoints/, and the tagged final.ckpt at the end.
//
// A matching final checkpoint makes the call a no-op; a partial run with
// matching checkpoints resumes with a continuous step counter. Artifacts
// from a differently configured run are refused, never overwritten.
TrainOutcome run_training(const RunConfig& cfg, const std::string& data_dir,
                          const std::string& out_dir,
                          const std::function<void(const TrainProgress&)>& on_step = {});

}  // namespace hce
