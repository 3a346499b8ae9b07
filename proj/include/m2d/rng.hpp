#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace m2d {

// Deterministic RNG used everywhere randomness is needed. All draws go
// through hand-rolled transforms (not std:: distributions, whose output is
// implementation-defined) so that identical seeds give identical streams.
// Generators are caller-owned and passed in; nothing in the library holds
// global RNG state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller (single value per call; the pair's
  // second half is cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, std) truncated at +/- 2 std, the usual transformer init.
  double trunc_normal(double std_dev) {
    for (;;) {
      double v = normal();
      if (v >= -2.0 && v <= 2.0) return v * std_dev;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream; mixing uses splitmix64 so distinct stream ids
  // give uncorrelated seeds.
  Rng fork(std::uint64_t stream_id) {
    return Rng(splitmix64(engine_() ^ splitmix64(stream_id)));
  }

  // Canonical per-step generator: every training step draws from
  // for_step(seed, step) only, which is what makes checkpoint resume exact.
  static Rng for_step(std::uint64_t seed, std::uint64_t step) {
    return Rng(splitmix64(splitmix64(seed) ^ splitmix64(step + 0x9e3779b97f4a7c15ULL)));
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace m2d
