#pragma once

#include <cstdint>
#include <string>

#include "m2d/audio_frontend.hpp"
#include "m2d/eval_harness.hpp"
#include "m2d/m2d_core.hpp"
#include "m2d/m2d_x.hpp"
#include "m2d/networks.hpp"

namespace m2d {

// Where training clips come from: either a synthetic task generated on the
// fly or a directory of 16-bit mono wav files.
struct DataConfig {
  bool use_synth = true;
  SynthTask synth = default_synth_task();
  uint64_t synth_seed = 1234;
  std::string train_dir;        // exclusive with use_synth
  std::string background_dir;   // optional noise source for eta > 0
  std::string labels_path;      // clip-id -> class indices, supervised only
  std::string teacher_path;     // checkpoint for distill / regularize
};

struct RunConfig {
  std::string preset;  // "", "audioset", "speech", "further"
  uint64_t seed = 0;
  MelConfig mel;
  DatasetStats stats;  // resolved values; meaningless while stats_preset is "dataset"
  // "" after explicit mean/std_dev, a named preset once resolved, or the
  // special value "dataset": compute from the training set before the run.
  std::string stats_preset = "dataset";
  EncoderConfig encoder;
  double mask_ratio = 0.7;
  Variant variant = Variant::m2d;
  bool has_offline = false;
  OfflineConfig offline;
  TauSchedule schedule;       // total_steps mirrored from below
  OptimizerConfig optimizer;  // total_steps mirrored from below
  long total_steps = 300;
  int batch_size = 8;
  int grad_accum_steps = 1;
  long virtual_epoch_samples = 0;  // 0: one epoch = one pass over the data list
  long save_every = 0;             // 0: final checkpoint only
  DataConfig data;

  void validate() const;
  // Canonical serialized form; parse(serialize(c)) == c field for field.
  std::string to_json() const;
};

// Empty or missing content yields the stock defaults (mask 0.7, base lr 3e-4,
// momentum 0.99995 -> 0.99999). Unknown keys anywhere are hard errors.
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& json_text);

}  // namespace m2d
