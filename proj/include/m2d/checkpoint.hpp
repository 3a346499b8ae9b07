#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m2d/common.hpp"
#include "m2d/m2d_core.hpp"
#include "m2d/m2d_x.hpp"
#include "m2d/networks.hpp"

namespace m2d {

inline constexpr uint32_t kCheckpointVersion = 1;

// In-memory image of the on-disk container. Tensor order is preserved
// verbatim, which is what makes save(load(x)) byte-identical to x.
struct CheckpointData {
  uint32_t version = kCheckpointVersion;
  long step = 0;
  std::string config_json;  // enough to rebuild every shape below
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const;
};

// Versioned binary container: magic, version, step, length-prefixed config,
// length-prefixed named f64 tensors, trailing FNV-1a checksum. Writes go to a
// temp file first and are renamed into place.
void save_checkpoint(const std::string& path, const CheckpointData& data);
// Verifies magic, version, checksum, and exact length before any state is
// touched; truncation or tampering is an IoError.
CheckpointData load_checkpoint(const std::string& path);

// Canonical tensor naming: online.*, target.*, mapper.*, opt.*. Pass null for
// the parts a run does not have.
CheckpointData snapshot_state(long step, const std::string& config_json,
                              OnlineState& online, TargetState& target,
                              MapperParams* mapper, AdamW* opt);
// Shapes must already match the checkpoint (build the model from its config
// snapshot first); mismatches and missing tensors are ConsistencyErrors.
void restore_state(const CheckpointData& ckpt, OnlineState& online, TargetState& target,
                   MapperParams* mapper, AdamW* opt);

}  // namespace m2d
