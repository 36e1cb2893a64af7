#pragma once

#include <cstdint>
#include <string>

#include "hce/detector.hpp"
#include "hce/model.hpp"

namespace hce {

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  long long step = 0;
  int epoch = 0;
};

// Self-describing binary checkpoint: keyed float arrays for every enabled
// parameter (plus optimizer velocity when an optimizer is given) and the
// run metadata. Loading verifies that the stored keys and shapes match the
// model exactly and restores values bit-identically.
void save_checkpoint(const std::string& path, Model<float>& m, const Sgd<float>* opt,
                     const CheckpointMeta& meta);

CheckpointMeta load_checkpoint(const std::string& path, Model<float>& m, Sgd<float>* opt);

// Reads only the metadata header.
CheckpointMeta read_checkpoint_meta(const std::string& path);

}  // namespace hce
