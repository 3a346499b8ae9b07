#pragma once

#include <string>
#include <vector>

#include "m2d/checkpoint.hpp"
#include "m2d/config.hpp"
#include "m2d/eval_harness.hpp"
#include "m2d/m2d_x.hpp"
#include "m2d/metrics.hpp"

namespace m2d {

// Training corpus in log-mel space plus the patch geometry derived from it.
// Clips stay un-standardized so background mixing can happen in the power
// domain; standardization is applied per window at batch time.
struct Dataset {
  std::vector<Spectrogram> raw;          // full-length log-mels, padded to >= clip_frames
  std::vector<Spectrogram> raw_bg;       // background pool; empty falls back to raw
  std::vector<std::vector<int>> labels;  // class indices per clip; empty when unlabeled
  std::vector<std::string> ids;
  int n_classes = 0;
  DatasetStats stats;  // resolved (computed here when the config says "dataset")
  PatchGrid grid;      // n_t from the shortest clip, n_f from the mel bins
  Matrix pe;
  int clip_frames = 0;  // grid.n_t * grid.patch_t
};

Dataset prepare_dataset(const RunConfig& cfg);

// Everything one step consumes, drawn from Rng::for_step(cfg.seed, step) in a
// fixed per-item order (clip, crop offset, background, mask); this draw
// discipline is what makes checkpoint resume bit-exact.
struct StepBatch {
  OfflineBatch batch;  // x_noisy always; y_audio / y_label per scenario
  std::vector<MaskPlan> plans;
};

StepBatch draw_step_batch(const Dataset& ds, const RunConfig& cfg, long step);

struct RunResult {
  long steps_done = 0;
  double last_loss_total = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Pre-training driven by a validated config; writes metrics.csv and
// checkpoint.ckpt under out_dir (plus checkpoint_<step>.ckpt at save_every).
// `resume` continues from a snapshot; its config must be the one in use.
// run_pretrain rejects configs with an offline section; run_pretrain_x
// requires one.
RunResult run_pretrain(const RunConfig& cfg, const std::string& out_dir,
                       const CheckpointData* resume = nullptr);
RunResult run_pretrain_x(const RunConfig& cfg, const std::string& out_dir,
                         const CheckpointData* resume = nullptr);

// Model rebuilt from a checkpoint's config snapshot and tensors.
struct LoadedModel {
  RunConfig cfg;
  OnlineState online;
  TargetState target;
  PatchGrid grid;
  Matrix pe;
};
LoadedModel model_from_checkpoint(const CheckpointData& ckpt);
FeatureExtractor extractor_from_checkpoint(const CheckpointData& ckpt);

// Frozen-encoder clip features for the data described by data_cfg, computed
// with the checkpoint's own mel settings, stats, and grid.
struct ExtractResult {
  Matrix features;  // one row per clip
  std::vector<int> labels;  // -1 where unknown
  std::vector<std::string> ids;
  std::string task;  // human-readable data source tag
  int n_classes = 0;
};
ExtractResult extract_features(const CheckpointData& ckpt, const RunConfig& data_cfg);

// Features ride in the same checked binary container as checkpoints.
void write_features(const std::string& path, const ExtractResult& res);
ExtractResult read_features(const std::string& path);

// Probe aggregation over seeds (mean accuracy, max - min spread).
EncoderProbe probe_features(const Matrix& features, const std::vector<int>& labels,
                            int n_classes, const std::vector<uint64_t>& seeds,
                            const ProbeHyper& hyper = ProbeHyper{});

// Pretrained weights vs their own random initialization on the config's
// synthetic task.
CompareResult compare_to_random_init(const CheckpointData& ckpt,
                                     const std::vector<uint64_t>& seeds,
                                     const ProbeHyper& hyper = ProbeHyper{});

}  // namespace m2d
