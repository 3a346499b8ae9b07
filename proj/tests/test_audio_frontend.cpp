#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "m2d/audio_frontend.hpp"
#include "m2d/errors.hpp"

using namespace m2d;

namespace {

std::vector<double> sine(double freq_hz, double seconds, int rate) {
  std::vector<double> v(size_t(seconds * rate));
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = std::sin(2.0 * M_PI * freq_hz * double(i) / rate);
  return v;
}

// Independent oracle for mel filter center frequencies: corners equally
// spaced on the 2595*log10(1 + f/700) scale, centers are the interior points.
std::vector<double> oracle_mel_centers(const MelConfig& cfg) {
  auto to_mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto to_hz = [](double mel) {
    return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
  };
  double lo = to_mel(cfg.fmin_hz), hi = to_mel(cfg.fmax_hz);
  std::vector<double> centers(cfg.n_mels);
  for (int m = 0; m < cfg.n_mels; ++m)
    centers[m] = to_hz(lo + (hi - lo) * (m + 1) / (cfg.n_mels + 1));
  return centers;
}

}  // namespace

TEST_CASE("config validation rejects bad parameters") {
  MelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("fmin above fmax") {
    cfg.fmin_hz = 9000.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("fmax above nyquist") {
    cfg.fmax_hz = 8001.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("hop longer than window") {
    cfg.hop_ms = 30.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("zero mel bins") {
    cfg.n_mels = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("negative rate") {
    cfg.sample_rate_hz = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("default window and hop are 400 and 160 samples") {
  MelConfig cfg;
  CHECK(cfg.window_samples() == 400);
  CHECK(cfg.hop_samples() == 160);
}

TEST_CASE("frame count is ceil(samples / hop)") {
  MelConfig cfg;
  // Canonical pre-training clip length: 608 frames from 97280 samples.
  auto spec = compute_logmel(std::vector<double>(97280, 0.0), cfg);
  CHECK(spec.data.rows() == 80);
  CHECK(spec.data.cols() == 608);
  // Exactly 6.00 s gives 600 frames under the same convention.
  auto spec6 = compute_logmel(std::vector<double>(96000, 0.0), cfg);
  CHECK(spec6.data.cols() == 600);
  // One extra sample beyond a hop multiple adds one frame.
  auto odd = compute_logmel(std::vector<double>(1601, 0.0), cfg);
  CHECK(odd.data.cols() == 11);
}

TEST_CASE("silence maps to a constant matrix at the log floor") {
  MelConfig cfg;
  auto spec = compute_logmel(std::vector<double>(16000, 0.0), cfg);
  double expect = std::log(1e-10);
  CHECK(spec.data.minCoeff() == doctest::Approx(expect));
  CHECK(spec.data.maxCoeff() == doctest::Approx(expect));
}

TEST_CASE("pure 1 kHz tone peaks at the mel bin nearest 1 kHz") {
  MelConfig cfg;
  auto spec = compute_logmel(sine(1000.0, 1.0, cfg.sample_rate_hz), cfg);
  Eigen::VectorXd avg = spec.data.rowwise().mean();
  int argmax = 0;
  avg.maxCoeff(&argmax);

  auto centers = oracle_mel_centers(cfg);
  int nearest = 0;
  for (int m = 1; m < cfg.n_mels; ++m)
    if (std::abs(centers[m] - 1000.0) < std::abs(centers[nearest] - 1000.0))
      nearest = m;
  CHECK(argmax == nearest);
}

TEST_CASE("identical waveform gives bit-identical spectrograms") {
  MelConfig cfg;
  auto wave = sine(333.0, 0.5, cfg.sample_rate_hz);
  auto a = compute_logmel(wave, cfg);
  auto b = compute_logmel(wave, cfg);
  CHECK((a.data.array() == b.data.array()).all());
}

TEST_CASE("input shorter than a window or non-finite input is rejected") {
  MelConfig cfg;
  CHECK_THROWS_AS(compute_logmel(std::vector<double>(399, 0.0), cfg), DataError);
  std::vector<double> bad(1000, 0.0);
  bad[500] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(compute_logmel(bad, cfg), DataError);
  bad[500] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(compute_logmel(bad, cfg), DataError);
}

TEST_CASE("standardize arithmetic") {
  Spectrogram s;
  s.config = MelConfig{};
  auto preset = dataset_stats_preset("audioset");
  CHECK(preset.mean == doctest::Approx(-7.1));
  CHECK(preset.std_dev == doctest::Approx(4.2));

  SUBCASE("constant at the dataset mean becomes zero") {
    s.data = Matrix::Constant(4, 6, -7.1);
    auto out = standardize(s, preset);
    CHECK(out.data.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }
  SUBCASE("unit stats are the identity") {
    s.data = Matrix::Random(3, 5);
    auto out = standardize(s, DatasetStats{0.0, 1.0});
    CHECK((out.data - s.data).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }
  SUBCASE("two-point example") {
    s.data.resize(1, 2);
    s.data << -7.1, -2.9;
    auto out = standardize(s, preset);
    CHECK(out.data(0, 0) == doctest::Approx(0.0));
    CHECK(out.data(0, 1) == doctest::Approx(1.0));
  }
}

TEST_CASE("standardize then unstandardize recovers the input") {
  Spectrogram s;
  s.config = MelConfig{};
  s.data = Matrix::Random(80, 32).array() * 3.0 - 7.0;
  auto stats = dataset_stats_preset("audioset");
  auto back = unstandardize(standardize(s, stats), stats);
  for (int i = 0; i < s.data.rows(); ++i)
    for (int j = 0; j < s.data.cols(); ++j)
      CHECK(back.data(i, j) ==
            doctest::Approx(s.data(i, j)).epsilon(1e-6));
}

TEST_CASE("unknown stats preset is rejected") {
  CHECK_THROWS_AS(dataset_stats_preset("imagenet"), ConfigError);
}

TEST_CASE("noisy mixing endpoints and blend behavior") {
  Spectrogram a, b;
  a.config = b.config = MelConfig{};
  a.data = Matrix::Random(8, 10).array() - 6.0;
  b.data = Matrix::Random(8, 10).array() - 4.0;

  SUBCASE("eta 0 returns the target exactly") {
    auto out = mix_noisy(a, b, 0.0);
    CHECK((out.data.array() == a.data.array()).all());
  }
  SUBCASE("eta 1 returns the background exactly") {
    auto out = mix_noisy(a, b, 1.0);
    CHECK((out.data.array() == b.data.array()).all());
  }
  SUBCASE("equal constants are a fixed point for any eta") {
    Spectrogram c = a, d = a;
    c.data.setConstant(-5.5);
    d.data.setConstant(-5.5);
    for (double eta : {0.1, 0.3, 0.9}) {
      auto out = mix_noisy(c, d, eta);
      CHECK(out.data.minCoeff() == doctest::Approx(-5.5));
      CHECK(out.data.maxCoeff() == doctest::Approx(-5.5));
    }
  }
  SUBCASE("result lies between the elementwise min and max") {
    auto out = mix_noisy(a, b, 0.37);
    auto lo = a.data.cwiseMin(b.data);
    auto hi = a.data.cwiseMax(b.data);
    CHECK(((out.data.array() >= lo.array() - 1e-12) &&
           (out.data.array() <= hi.array() + 1e-12))
              .all());
  }
  SUBCASE("monotone in eta when background dominates") {
    Spectrogram hi = a;
    hi.data = a.data.array() + 2.0;  // strictly above the target everywhere
    Matrix prev = mix_noisy(a, hi, 0.0).data;
    for (double eta : {0.2, 0.4, 0.6, 0.8, 1.0}) {
      Matrix cur = mix_noisy(a, hi, eta).data;
      CHECK(((cur - prev).array() >= -1e-12).all());
      prev = cur;
    }
  }
  SUBCASE("shape mismatch raises") {
    Spectrogram small;
    small.config = a.config;
    small.data = Matrix::Zero(4, 10);
    CHECK_THROWS_AS(mix_noisy(a, small, 0.5), DimensionError);
  }
  SUBCASE("eta outside [0,1] raises") {
    CHECK_THROWS_AS(mix_noisy(a, b, -0.01), DomainError);
    CHECK_THROWS_AS(mix_noisy(a, b, 1.01), DomainError);
  }
}
