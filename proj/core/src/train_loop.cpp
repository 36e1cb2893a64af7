#include "hce/train_loop.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace hce {

namespace {

namespace fs = std::filesystem;

std::string step_checkpoint_name(long long step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06lld.ckpt", step);
  return buf;
}

// Highest-step periodic checkpoint in dir, or empty.
fs::path latest_checkpoint(const fs::path& dir, long long* step_out) {
  fs::path best;
  long long best_step = -1;
  if (!fs::exists(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    long long s = 0;
    if (std::sscanf(name.c_str(), "step_%lld.ckpt", &s) == 1 && s > best_step) {
      best_step = s;
      best = e.path();
    }
  }
  *step_out = best_step;
  return best;
}

}  // namespace

TrainOutcome run_training(const RunConfig& cfg, const std::string& data_dir,
                          const std::string& out_dir,
                          const std::function<void(const TrainProgress&)>& on_step) {
  cfg.validate();
  const std::uint64_t want_hash = model_hash(cfg);
  const fs::path out(out_dir);
  const fs::path ckpt_dir = out / "checkpoints";
  const fs::path final_path = ckpt_dir / "final.ckpt";
  const fs::path log_path = out / "train_log.jsonl";

  TrainOutcome outcome;
  outcome.final_checkpoint = final_path.string();

  if (fs::exists(final_path)) {
    CheckpointMeta meta = read_checkpoint_meta(final_path.string());
    if (meta.config_hash != want_hash)
      throw std::runtime_error("train: " + final_path.string() +
                               " was saved from a different configuration; refusing to touch it");
    outcome.already_complete = true;
    outcome.steps = meta.step;
    return outcome;
  }

  auto train = load_dataset(data_dir, "train");
  if (train.empty()) throw std::runtime_error("train: empty train split in " + data_dir);
  const long long bpe =
      (static_cast<long long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long long total_steps = bpe * cfg.epochs;

  Model<float> model = make_model<float>(model_spec(cfg), cfg.seed);
  Sgd<float> opt;
  opt.cfg = sgd_config(cfg, static_cast<int>(total_steps));

  long long start_step = 0;
  long long found = -1;
  fs::path resume_from = latest_checkpoint(ckpt_dir, &found);
  if (!resume_from.empty()) {
    CheckpointMeta meta = load_checkpoint(resume_from.string(), model, &opt);
    if (meta.config_hash != want_hash)
      throw std::runtime_error("train: " + resume_from.string() +
                               " was saved from a different configuration; refusing to touch it");
    start_step = meta.step;
    if (start_step >= total_steps)
      throw std::runtime_error("train: " + resume_from.string() + " is already at step " +
                               std::to_string(start_step) + " of a " +
                               std::to_string(total_steps) +
                               "-step schedule; the schedule shrank — pick a fresh --out");
    outcome.resumed = true;
  } else if (fs::exists(log_path)) {
    throw std::runtime_error("train: " + log_path.string() +
                             " exists but there is no checkpoint to resume from; "
                             "remove it or pick a fresh --out");
  }

  if (outcome.resumed) {
    // Steps logged after the checkpoint was written lost their optimizer
    // state with the interrupt; drop those lines so the rerun's entries
    // continue the sequence instead of duplicating it. A log that is
    // shorter than the checkpoint has lost history and cannot be healed.
    std::vector<std::string> lines;
    {
      std::ifstream in(log_path);
      std::string line;
      while (std::getline(in, line)) lines.push_back(line);
    }
    if (static_cast<long long>(lines.size()) < start_step)
      throw std::runtime_error("train: " + log_path.string() + " has " +
                               std::to_string(lines.size()) + " steps but the checkpoint is at " +
                               "step " + std::to_string(start_step) +
                               "; the log lost history — pick a fresh --out");
    if (static_cast<long long>(lines.size()) > start_step) {
      std::ofstream rewrite(log_path, std::ios::trunc);
      for (long long i = 0; i < start_step; ++i) rewrite << lines[static_cast<size_t>(i)] << "\n";
    }
  }

  fs::create_directories(ckpt_dir);
  std::ofstream log(log_path, outcome.resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot write " + log_path.string());

  TrainStepConfig tc;
  tc.proposals.source = cfg.proposal_source;

  std::vector<int> order(train.size());
  long long order_epoch = -1;
  for (long long g = start_step; g < total_steps; ++g) {
    const int epoch = static_cast<int>(g / bpe);
    if (epoch != order_epoch) {
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      Rng shuffle_rng(mix_seed(cfg.seed, "epoch/" + std::to_string(epoch)));
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.uniform_int(static_cast<std::uint64_t>(i))]);
      order_epoch = epoch;
    }
    const long long b = g % bpe;
    std::vector<const AnnotatedImage*> batch;
    for (long long i = b * cfg.batch_size;
         i < std::min<long long>((b + 1) * cfg.batch_size, static_cast<long long>(train.size()));
         ++i)
      batch.push_back(&train[static_cast<size_t>(order[static_cast<size_t>(i)])]);

    Rng step_rng(mix_seed(cfg.seed, "step/" + std::to_string(g)));
    StepResult r;
    try {
      r = train_step(model, batch, tc, opt, step_rng);
    } catch (const std::exception& e) {
      throw std::runtime_error("train: aborted at step " + std::to_string(g + 1) + " of " +
                               std::to_string(total_steps) + ": " + e.what());
    }

    nlohmann::ordered_json line;
    line["step"] = g + 1;
    line["L_feat"] = r.losses.feat;
    line["L_conf"] = r.losses.conf;
    line["L_mll"] = r.losses.mll;
    line["L_rpn"] = r.losses.rpn;
    line["lr"] = r.lr;
    log << line.dump() << "\n";

    CheckpointMeta meta;
    meta.config_hash = want_hash;
    meta.step = g + 1;
    meta.epoch = epoch;
    if ((g + 1) % cfg.checkpoint_every == 0 && g + 1 < total_steps)
      save_checkpoint((ckpt_dir / step_checkpoint_name(g + 1)).string(), model, &opt, meta);
    if (g + 1 == total_steps) {
      log.flush();
      save_checkpoint(final_path.string(), model, &opt, meta);
    }

    if (on_step) {
      TrainProgress p;
      p.step = g + 1;
      p.epoch = epoch;
      p.total_steps = total_steps;
      p.losses = r.losses;
      p.lr = r.lr;
      p.rois = r.rois;
      on_step(p);
    }
  }

  outcome.steps = total_steps;
  return outcome;
}

}  // namespace hce
