#pragma once

#include <string>
#include <vector>

#include "m2d/common.hpp"

namespace m2d {

struct MelConfig {
  int sample_rate_hz = 16000;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int n_mels = 80;
  double fmin_hz = 50.0;
  double fmax_hz = 8000.0;

  int window_samples() const;
  int hop_samples() const;
  // Throws ConfigError unless: sample_rate > 0, 0 < fmin < fmax <= Nyquist,
  // n_mels > 0, 0 < hop_ms <= window_ms.
  void validate() const;
};

struct DatasetStats {
  double mean = 0.0;
  double std_dev = 1.0;  // must stay > 0
  void validate() const;
};

// Named normalization presets; "audioset" is (-7.1, 4.2).
DatasetStats dataset_stats_preset(const std::string& name);

struct Spectrogram {
  Matrix data;  // n_mels x frames, natural-log mel power
  MelConfig config;
};

// Centered frames (reflection padded), periodic Hann window, power mel with a
// 1e-10 floor before the log. Frame count is ceil(samples / hop).
Spectrogram compute_logmel(const std::vector<double>& waveform, const MelConfig& config);

Spectrogram standardize(const Spectrogram& spec, const DatasetStats& stats);
Spectrogram unstandardize(const Spectrogram& spec, const DatasetStats& stats);

// Blends two un-standardized log-mels in the linear power domain:
// log((1-eta) * exp(x_targ) + eta * exp(x_bg)). Standardize after mixing.
Spectrogram mix_noisy(const Spectrogram& x_targ, const Spectrogram& x_bg, double eta);

}  // namespace m2d
