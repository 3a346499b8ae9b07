#include "m2d/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "m2d/errors.hpp"

namespace m2d {

void SynthTask::validate() const {
  if (n_classes < 2) throw ConfigError("a task needs at least two classes");
  if (clips_per_class < 1) throw ConfigError("clips_per_class must be positive");
  if (duration_s <= 0.0) throw ConfigError("duration must be positive");
  if (sample_rate_hz <= 0) throw ConfigError("sample rate must be positive");
  if (int(class_spec.size()) != n_classes)
    throw ConfigError("one class recipe per class required");
  double prev_hi = 0.0;
  for (const auto& c : class_spec) {
    if (!(c.f_lo_hz > prev_hi && c.f_hi_hz > c.f_lo_hz))
      throw ConfigError("class bands must be ascending and disjoint");
    if (c.f_hi_hz > double(sample_rate_hz) / 2.0)
      throw ConfigError("class band exceeds the Nyquist frequency");
    prev_hi = c.f_hi_hz;
  }
}

SynthTask default_synth_task() {
  SynthTask t;
  for (int i = 0; i < t.n_classes; ++i) {
    ClassSpec c;
    c.f_lo_hz = 200.0 * std::pow(3.0, i);
    c.f_hi_hz = std::min(1.8 * c.f_lo_hz, 7600.0);
    t.class_spec.push_back(c);
  }
  return t;
}

SynthSet generate_synth(const SynthTask& task, Rng& rng) {
  task.validate();
  const double two_pi = 6.283185307179586476925286766559;
  const long n_samples = std::lround(task.duration_s * task.sample_rate_hz);
  SynthSet set;
  set.n_classes = task.n_classes;
  set.sample_rate_hz = task.sample_rate_hz;
  for (int c = 0; c < task.n_classes; ++c) {
    const ClassSpec& spec = task.class_spec[size_t(c)];
    for (int k = 0; k < task.clips_per_class; ++k) {
      double f0 = rng.uniform(spec.f_lo_hz, spec.f_hi_hz);
      double phase0 = rng.uniform(0.0, two_pi);
      double am_rate = rng.uniform(spec.am_rate_lo_hz, spec.am_rate_hi_hz);
      double am_depth = rng.uniform(spec.am_depth_lo, spec.am_depth_hi);
      double am_phase = rng.uniform(0.0, two_pi);
      double fm_rate = rng.uniform(spec.fm_rate_lo_hz, spec.fm_rate_hi_hz);
      double fm_dev = rng.uniform(0.0, spec.fm_rel_dev_hi);
      double noise_amp = rng.uniform(spec.noise_lo, spec.noise_hi);
      double gain = rng.uniform(spec.gain_lo, spec.gain_hi);

      // Harmonics that would fold over the mel ceiling are dropped so the
      // fundamental keeps the dominant bin.
      std::vector<double> amps = {1.0, 0.25, 0.1};
      std::vector<double> wave(static_cast<size_t>(n_samples));
      double fm_scale = f0 * fm_dev / fm_rate;
      double peak = 0.0;
      for (long n = 0; n < n_samples; ++n) {
        double t = double(n) / double(task.sample_rate_hz);
        double phi = two_pi * (f0 * t + fm_scale * std::sin(two_pi * fm_rate * t)) + phase0;
        double tone = 0.0;
        for (size_t h = 0; h < amps.size(); ++h) {
          double f_inst = (double(h) + 1.0) * f0 * (1.0 + fm_dev);
          if (f_inst < 7600.0) tone += amps[h] * std::sin((double(h) + 1.0) * phi);
        }
        double am = 1.0 - am_depth * (0.5 + 0.5 * std::sin(two_pi * am_rate * t + am_phase));
        double v = am * tone + noise_amp * rng.normal();
        wave[size_t(n)] = v;
        peak = std::max(peak, std::abs(v));
      }
      double scale = gain / std::max(peak, 1e-9);
      for (auto& v : wave) v *= scale;
      set.waves.push_back(std::move(wave));
      set.labels.push_back(c);
    }
  }
  return set;
}

ProbeSplit stratified_split(const std::vector<int>& labels, int n_classes,
                            const ProbeHyper& hyper, Rng& rng) {
  if (hyper.train_frac <= 0.0 || hyper.val_frac <= 0.0 ||
      hyper.train_frac + hyper.val_frac >= 1.0)
    throw ConfigError("split fractions must leave room for train, val, and test");
  ProbeSplit split;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> idx;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(int(i));
    if (idx.empty())
      throw DataError("class " + std::to_string(c) + " missing from the label set");
    rng.shuffle(idx);
    long n = long(idx.size());
    long n_val = std::max<long>(1, long(hyper.val_frac * double(n)));
    long n_test = std::max<long>(1, long((1.0 - hyper.train_frac - hyper.val_frac) * double(n)));
    long n_train = n - n_val - n_test;
    if (n_train < 1)
      throw DataError("class " + std::to_string(c) + " missing from the train split");
    for (long i = 0; i < n_train; ++i) split.train.push_back(idx[size_t(i)]);
    for (long i = n_train; i < n_train + n_val; ++i) split.val.push_back(idx[size_t(i)]);
    for (long i = n_train + n_val; i < n; ++i) split.test.push_back(idx[size_t(i)]);
  }
  return split;
}

namespace {

Matrix gather(const Matrix& x, const std::vector<int>& rows) {
  Matrix out(long(rows.size()), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(long(i)) = x.row(rows[i]);
  return out;
}

double accuracy_of(const Matrix& x, const std::vector<int>& labels,
                   const std::vector<int>& rows, const Matrix& w, const Matrix& b) {
  if (rows.empty()) return 0.0;
  long hits = 0;
  for (int r : rows) {
    Eigen::RowVectorXd logits = x.row(r) * w + b.row(0);
    long arg = 0;
    logits.maxCoeff(&arg);
    if (int(arg) == labels[size_t(r)]) ++hits;
  }
  return double(hits) / double(rows.size());
}

double ce_of(const Matrix& x, const std::vector<int>& labels,
             const std::vector<int>& rows, const Matrix& w, const Matrix& b) {
  double loss = 0.0;
  for (int r : rows) {
    Eigen::RowVectorXd logits = x.row(r) * w + b.row(0);
    double mx = logits.maxCoeff();
    double lse = std::log((logits.array() - mx).exp().sum()) + mx;
    loss += lse - logits(labels[size_t(r)]);
  }
  return loss / double(rows.size());
}

}  // namespace

ProbeResult linear_probe(const Matrix& features, const std::vector<int>& labels,
                         int n_classes, const ProbeHyper& hyper, uint64_t seed) {
  if (features.rows() != long(labels.size()))
    throw DimensionError("one label per feature row required");
  if (n_classes < 2) throw ConfigError("probe needs at least two classes");
  for (int l : labels)
    if (l < 0 || l >= n_classes) throw DataError("label outside [0, n_classes)");

  Rng rng(seed);
  ProbeSplit split = stratified_split(labels, n_classes, hyper, rng);

  // Center per dimension with train-split statistics, but scale by a single
  // global deviation: per-dimension scaling would inflate uninformative
  // low-variance dimensions to the same magnitude as the signal, which the
  // small fixed-step optimizer cannot undo within the epoch budget.
  Matrix train_x = gather(features, split.train);
  Eigen::RowVectorXd mu = train_x.colwise().mean();
  double sd = std::sqrt((train_x.rowwise() - mu).array().square().mean() + 1e-12);
  Matrix x = features;
  x.rowwise() -= mu;
  x /= sd;

  const long d = x.cols();
  Matrix w = Matrix::Zero(d, n_classes), b = Matrix::Zero(1, n_classes);
  Matrix mw = w, vw = w, mb = b, vb = b;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long t = 0;

  Matrix best_w = w, best_b = b;
  double best_val = -1.0;
  double best_ce = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::vector<int> order = split.train;
  for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += size_t(hyper.batch_size)) {
      size_t hi = std::min(order.size(), at + size_t(hyper.batch_size));
      long bs = long(hi - at);
      Matrix gw = Matrix::Zero(d, n_classes), gb = Matrix::Zero(1, n_classes);
      for (size_t i = at; i < hi; ++i) {
        int r = order[i];
        Eigen::RowVectorXd logits = x.row(r) * w + b.row(0);
        Eigen::RowVectorXd p = (logits.array() - logits.maxCoeff()).exp();
        p /= p.sum();
        p(labels[size_t(r)]) -= 1.0;
        gw += x.row(r).transpose() * p / double(bs);
        gb.row(0) += p / double(bs);
      }
      ++t;
      double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
      mw = b1 * mw + (1 - b1) * gw;
      vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
      w -= hyper.lr * ((mw / c1).array() / ((vw / c2).array().sqrt() + eps)).matrix();
      mb = b1 * mb + (1 - b1) * gb;
      vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
      b -= hyper.lr * ((mb / c1).array() / ((vb / c2).array().sqrt() + eps)).matrix();
    }
    // Validation accuracy gates the snapshot; the cross-entropy breaks ties
    // so a small saturated validation split cannot freeze epoch-one weights.
    double val = accuracy_of(x, labels, split.val, w, b);
    double ce = ce_of(x, labels, split.val, w, b);
    if (val > best_val || (val == best_val && ce < best_ce)) {
      best_val = val;
      best_ce = ce;
      best_w = w;
      best_b = b;
      stale = 0;
    } else if (++stale >= hyper.patience) {
      break;
    }
  }

  ProbeResult res;
  res.accuracy = accuracy_of(x, labels, split.test, best_w, best_b);
  res.n_train = int(split.train.size());
  res.n_test = int(split.test.size());
  res.seed = seed;
  return res;
}

DatasetStats compute_stats(const std::vector<Spectrogram>& specs) {
  if (specs.empty()) throw DataError("no spectrograms to summarize");
  double sum = 0.0, sq = 0.0;
  long n = 0;
  for (const auto& s : specs) {
    sum += s.data.sum();
    sq += s.data.array().square().sum();
    n += s.data.size();
  }
  double mean = sum / double(n);
  double var = sq / double(n) - mean * mean;
  DatasetStats stats;
  stats.mean = mean;
  stats.std_dev = std::sqrt(std::max(var, 1e-12));
  return stats;
}

namespace {

Matrix features_from_specs(FeatureExtractor& ex, const std::vector<Spectrogram>& specs) {
  const int chunk = ex.grid.n_t * ex.cfg.patch_t;
  Matrix out;
  for (size_t i = 0; i < specs.size(); ++i) {
    FrameFeatures frames = encode_chunked(ex, specs[i], chunk);
    ClipFeature clip = clip_feature(frames);
    if (i == 0) out = Matrix(long(specs.size()), clip.data.cols());
    out.row(long(i)) = clip.data.row(0);
  }
  return out;
}

std::vector<Spectrogram> standardized_logmels(const SynthSet& set, DatasetStats* used) {
  MelConfig mel;
  mel.sample_rate_hz = set.sample_rate_hz;
  std::vector<Spectrogram> specs;
  specs.reserve(set.waves.size());
  for (const auto& wave : set.waves) specs.push_back(compute_logmel(wave, mel));
  DatasetStats stats = compute_stats(specs);
  if (used) *used = stats;
  for (auto& s : specs) s = standardize(s, stats);
  return specs;
}

}  // namespace

Matrix clip_features_for(FeatureExtractor& ex, const SynthSet& set,
                         const DatasetStats& stats) {
  MelConfig mel;
  mel.sample_rate_hz = set.sample_rate_hz;
  std::vector<Spectrogram> specs;
  specs.reserve(set.waves.size());
  for (const auto& wave : set.waves)
    specs.push_back(standardize(compute_logmel(wave, mel), stats));
  return features_from_specs(ex, specs);
}

CompareResult compare_encoders(FeatureExtractor& candidate, FeatureExtractor& baseline,
                               const SynthTask& task, const std::vector<uint64_t>& seeds,
                               const ProbeHyper& hyper) {
  const EncoderConfig& a = candidate.cfg;
  const EncoderConfig& b = baseline.cfg;
  if (a.depth != b.depth || a.dim != b.dim || a.heads != b.heads ||
      a.patch_f != b.patch_f || a.patch_t != b.patch_t ||
      candidate.grid.n_f != baseline.grid.n_f || candidate.grid.n_t != baseline.grid.n_t)
    throw ConsistencyError("encoder architectures differ");
  if (seeds.empty()) throw ConfigError("at least one seed required");
  task.validate();

  CompareResult res;
  for (uint64_t seed : seeds) {
    Rng rng(seed);
    SynthSet set = generate_synth(task, rng);
    std::vector<Spectrogram> specs = standardized_logmels(set, nullptr);
    Matrix fa = features_from_specs(candidate, specs);
    Matrix fb = features_from_specs(baseline, specs);
    res.candidate.per_seed.push_back(
        linear_probe(fa, set.labels, set.n_classes, hyper, seed));
    res.baseline.per_seed.push_back(
        linear_probe(fb, set.labels, set.n_classes, hyper, seed));
  }

  auto summarize = [](EncoderProbe& p) {
    double lo = 1.0, hi = 0.0, sum = 0.0;
    for (const auto& r : p.per_seed) {
      lo = std::min(lo, r.accuracy);
      hi = std::max(hi, r.accuracy);
      sum += r.accuracy;
    }
    p.mean_accuracy = sum / double(p.per_seed.size());
    p.accuracy_spread = hi - lo;
  };
  summarize(res.candidate);
  summarize(res.baseline);
  double lo = 2.0, hi = -2.0;
  for (size_t i = 0; i < seeds.size(); ++i) {
    double gap = res.candidate.per_seed[i].accuracy - res.baseline.per_seed[i].accuracy;
    lo = std::min(lo, gap);
    hi = std::max(hi, gap);
  }
  res.gap_mean = res.candidate.mean_accuracy - res.baseline.mean_accuracy;
  res.gap_spread = hi - lo;
  return res;
}

}  // namespace m2d
