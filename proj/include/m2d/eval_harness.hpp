#pragma once

#include <cstdint>
#include <vector>

#include "m2d/audio_frontend.hpp"
#include "m2d/rng.hpp"
#include "m2d/transfer.hpp"

namespace m2d {

// Per-class generative recipe: a fundamental band plus nuisance ranges that
// vary within the class without moving the dominant frequency.
struct ClassSpec {
  double f_lo_hz = 0.0;
  double f_hi_hz = 0.0;
  double am_rate_lo_hz = 1.0, am_rate_hi_hz = 8.0;
  double am_depth_lo = 0.2, am_depth_hi = 0.6;
  double fm_rate_lo_hz = 2.0, fm_rate_hi_hz = 6.0;
  double fm_rel_dev_hi = 0.01;
  double noise_lo = 0.005, noise_hi = 0.02;
  double gain_lo = 0.4, gain_hi = 0.9;
};

struct SynthTask {
  int n_classes = 4;
  int clips_per_class = 64;
  double duration_s = 2.0;
  int sample_rate_hz = 16000;
  std::vector<ClassSpec> class_spec;  // one per class, ascending disjoint bands
  void validate() const;
};

// Four harmonically separated bands (geometric factor 3 between band floors)
// so classes stay apart even under FM drift and window smearing.
SynthTask default_synth_task();

struct SynthSet {
  std::vector<std::vector<double>> waves;
  std::vector<int> labels;
  int n_classes = 0;
  int sample_rate_hz = 0;
};

// Deterministic given the rng state; class-major order, balanced counts,
// samples within [-1, 1].
SynthSet generate_synth(const SynthTask& task, Rng& rng);

struct ProbeHyper {
  double lr = 3e-5;
  int max_epochs = 200;
  int patience = 20;  // epochs without a validation-accuracy improvement
  int batch_size = 16;
  double train_frac = 0.6;
  double val_frac = 0.2;
};

struct ProbeResult {
  double accuracy = 0.0;  // held-out test split only
  int n_train = 0;
  int n_test = 0;
  uint64_t seed = 0;
};

struct ProbeSplit {
  std::vector<int> train, val, test;
};

// Per-class shuffle then proportional cut; every class must land in every
// split. linear_probe draws this split first from Rng(seed), so callers can
// reproduce it exactly.
ProbeSplit stratified_split(const std::vector<int>& labels, int n_classes,
                            const ProbeHyper& hyper, Rng& rng);

// Trains a softmax layer on frozen features (standardized with train-split
// statistics) with early stopping on validation accuracy; the encoder is
// never touched. Throws DataError when a class is missing from any split.
ProbeResult linear_probe(const Matrix& features, const std::vector<int>& labels,
                         int n_classes, const ProbeHyper& hyper, uint64_t seed);

// Mean/std over every spectrogram cell; the normalization used for a
// self-contained synthetic task.
DatasetStats compute_stats(const std::vector<Spectrogram>& specs);

// Full clip pipeline: log-mel, standardize, chunked encode, temporal mean.
Matrix clip_features_for(FeatureExtractor& ex, const SynthSet& set,
                         const DatasetStats& stats);

struct EncoderProbe {
  std::vector<ProbeResult> per_seed;
  double mean_accuracy = 0.0;
  double accuracy_spread = 0.0;  // max - min over seeds
};

struct CompareResult {
  EncoderProbe candidate;
  EncoderProbe baseline;
  double gap_mean = 0.0;    // candidate minus baseline
  double gap_spread = 0.0;  // max - min of the per-seed gaps
};

// Identical generate -> extract -> probe pipeline on both encoders for every
// seed. Architectures must match; neither encoder is modified.
CompareResult compare_encoders(FeatureExtractor& candidate, FeatureExtractor& baseline,
                               const SynthTask& task, const std::vector<uint64_t>& seeds,
                               const ProbeHyper& hyper = ProbeHyper{});

}  // namespace m2d
