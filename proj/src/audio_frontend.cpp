#include "m2d/audio_frontend.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <vector>

#include "m2d/errors.hpp"

namespace m2d {

namespace {

constexpr double kLogFloor = 1e-10;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters with peak 1, corner points equally spaced on the mel
// scale between fmin and fmax. Rows are filters, columns are FFT bins.
Matrix mel_filterbank(const MelConfig& cfg, int n_fft) {
  int n_bins = n_fft / 2 + 1;
  double mel_lo = hz_to_mel(cfg.fmin_hz);
  double mel_hi = hz_to_mel(cfg.fmax_hz);
  std::vector<double> corners(cfg.n_mels + 2);
  for (int m = 0; m < cfg.n_mels + 2; ++m) {
    corners[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (cfg.n_mels + 1));
  }
  Matrix fb = Matrix::Zero(cfg.n_mels, n_bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    double lo = corners[m], ctr = corners[m + 1], hi = corners[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      double f = double(k) * cfg.sample_rate_hz / n_fft;
      double rise = (f - lo) / (ctr - lo);
      double fall = (hi - f) / (hi - ctr);
      fb(m, k) = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

}  // namespace

int MelConfig::window_samples() const {
  return int(std::lround(window_ms * sample_rate_hz / 1000.0));
}

int MelConfig::hop_samples() const {
  return int(std::lround(hop_ms * sample_rate_hz / 1000.0));
}

void MelConfig::validate() const {
  if (sample_rate_hz <= 0)
    throw ConfigError("sample_rate_hz must be positive");
  if (!(fmin_hz > 0.0) || !(fmin_hz < fmax_hz) ||
      !(fmax_hz <= sample_rate_hz / 2.0))
    throw ConfigError("mel band must satisfy 0 < fmin < fmax <= sample_rate/2");
  if (n_mels <= 0) throw ConfigError("n_mels must be positive");
  if (!(hop_ms > 0.0) || hop_ms > window_ms)
    throw ConfigError("hop_ms must be in (0, window_ms]");
  if (window_samples() <= 0 || hop_samples() <= 0)
    throw ConfigError("window and hop must span at least one sample");
}

void DatasetStats::validate() const {
  if (!(std_dev > 0.0)) throw ConfigError("dataset std must be positive");
}

DatasetStats dataset_stats_preset(const std::string& name) {
  if (name == "audioset") return DatasetStats{-7.1, 4.2};
  if (name == "none") return DatasetStats{0.0, 1.0};
  throw ConfigError("unknown dataset stats preset: " + name);
}

Spectrogram compute_logmel(const std::vector<double>& waveform, const MelConfig& config) {
  config.validate();
  int win = config.window_samples();
  int hop = config.hop_samples();
  long n = long(waveform.size());
  if (n < win)
    throw DataError("waveform too short: " + std::to_string(n) +
                    " samples, need at least " + std::to_string(win));
  for (double s : waveform)
    if (!std::isfinite(s)) throw DataError("waveform contains non-finite samples");

  long frames = (n + hop - 1) / hop;

  // Reflection padding by half a window on each side keeps frame i centered
  // on sample i*hop.
  int pad = win / 2;
  std::vector<double> padded(size_t(n) + 2 * size_t(pad));
  for (int j = 0; j < pad; ++j) padded[j] = waveform[size_t(pad - j)];
  for (long i = 0; i < n; ++i) padded[size_t(pad + i)] = waveform[size_t(i)];
  for (int j = 0; j < pad; ++j)
    padded[size_t(pad + n + j)] = waveform[size_t(n - 2 - j)];

  std::vector<double> window(win);
  for (int k = 0; k < win; ++k)
    window[k] = 0.5 - 0.5 * std::cos(2.0 * M_PI * k / win);

  int n_bins = win / 2 + 1;
  Matrix power(n_bins, frames);
  Eigen::FFT<double> fft;
  std::vector<double> frame(win);
  std::vector<std::complex<double>> spec_line(win);
  for (long t = 0; t < frames; ++t) {
    for (int k = 0; k < win; ++k)
      frame[k] = padded[size_t(t * hop + k)] * window[k];
    fft.fwd(spec_line, frame);
    for (int k = 0; k < n_bins; ++k) power(k, t) = std::norm(spec_line[k]);
  }

  Matrix mel = mel_filterbank(config, win) * power;
  Spectrogram out;
  out.config = config;
  out.data = mel.cwiseMax(kLogFloor).array().log().matrix();
  return out;
}

Spectrogram standardize(const Spectrogram& spec, const DatasetStats& stats) {
  stats.validate();
  Spectrogram out;
  out.config = spec.config;
  out.data = (spec.data.array() - stats.mean) / stats.std_dev;
  return out;
}

Spectrogram unstandardize(const Spectrogram& spec, const DatasetStats& stats) {
  stats.validate();
  Spectrogram out;
  out.config = spec.config;
  out.data = spec.data.array() * stats.std_dev + stats.mean;
  return out;
}

Spectrogram mix_noisy(const Spectrogram& x_targ, const Spectrogram& x_bg, double eta) {
  if (x_targ.data.rows() != x_bg.data.rows() ||
      x_targ.data.cols() != x_bg.data.cols())
    throw DimensionError("mix_noisy inputs differ in shape");
  if (!(eta >= 0.0 && eta <= 1.0))
    throw DomainError("mixing ratio must lie in [0, 1]");
  if (eta == 0.0) return x_targ;
  if (eta == 1.0) return x_bg;
  Spectrogram out;
  out.config = x_targ.config;
  out.data = ((1.0 - eta) * x_targ.data.array().exp() +
              eta * x_bg.data.array().exp())
                 .log()
                 .matrix();
  return out;
}

}  // namespace m2d
