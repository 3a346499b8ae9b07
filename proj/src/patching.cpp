#include "m2d/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "m2d/errors.hpp"

namespace m2d {

std::pair<PatchGrid, Matrix> patchify(const Spectrogram& spec, int patch_f, int patch_t) {
  long F = spec.data.rows(), T = spec.data.cols();
  if (patch_f <= 0 || patch_t <= 0)
    throw ConfigError("patch sizes must be positive");
  if (F % patch_f != 0)
    throw DimensionError("frequency axis does not tile: " + std::to_string(F) +
                         " bins with patch height " + std::to_string(patch_f));
  if (T % patch_t != 0)
    throw DimensionError("time axis does not tile: " + std::to_string(T) +
                         " frames with patch width " + std::to_string(patch_t));

  PatchGrid grid;
  grid.patch_f = patch_f;
  grid.patch_t = patch_t;
  grid.n_f = int(F / patch_f);
  grid.n_t = int(T / patch_t);

  Matrix patches(grid.n_patches(), patch_f * patch_t);
  for (int pf = 0; pf < grid.n_f; ++pf) {
    for (int pt = 0; pt < grid.n_t; ++pt) {
      int row = pf * grid.n_t + pt;
      for (int a = 0; a < patch_f; ++a)
        for (int b = 0; b < patch_t; ++b)
          patches(row, a * patch_t + b) =
              spec.data(pf * patch_f + a, pt * patch_t + b);
    }
  }
  return {grid, patches};
}

Matrix unpatchify(const PatchGrid& grid, const Matrix& patches) {
  if (patches.rows() != grid.n_patches() ||
      patches.cols() != long(grid.patch_f) * grid.patch_t)
    throw DimensionError("patch matrix does not match the grid");
  Matrix out(grid.n_f * grid.patch_f, grid.n_t * grid.patch_t);
  for (int pf = 0; pf < grid.n_f; ++pf)
    for (int pt = 0; pt < grid.n_t; ++pt) {
      int row = pf * grid.n_t + pt;
      for (int a = 0; a < grid.patch_f; ++a)
        for (int b = 0; b < grid.patch_t; ++b)
          out(pf * grid.patch_f + a, pt * grid.patch_t + b) =
              patches(row, a * grid.patch_t + b);
    }
  return out;
}

TokenSequence embed_patches(const Matrix& patches, const Matrix& weight, const Vector& bias) {
  if (patches.cols() != weight.rows())
    throw DimensionError("patch width " + std::to_string(patches.cols()) +
                         " does not match embedding input " +
                         std::to_string(weight.rows()));
  if (weight.cols() != bias.size())
    throw DimensionError("embedding bias width mismatch");
  TokenSequence seq;
  seq.tokens = (patches * weight).rowwise() + bias.transpose();
  seq.positions.resize(size_t(patches.rows()));
  std::iota(seq.positions.begin(), seq.positions.end(), 0);
  return seq;
}

Matrix make_positional_encoding(const PatchGrid& grid, int dim) {
  if (dim <= 0 || dim % 4 != 0)
    throw ConfigError("positional encoding dim must be a positive multiple of 4");
  int quarter = dim / 4;
  Matrix pe(grid.n_patches(), dim);
  for (int f = 0; f < grid.n_f; ++f) {
    for (int t = 0; t < grid.n_t; ++t) {
      int row = f * grid.n_t + t;
      for (int j = 0; j < quarter; ++j) {
        double omega = std::pow(10000.0, -double(j) / quarter);
        pe(row, j) = std::sin(f * omega);
        pe(row, quarter + j) = std::cos(f * omega);
        pe(row, 2 * quarter + j) = std::sin(t * omega);
        pe(row, 3 * quarter + j) = std::cos(t * omega);
      }
    }
  }
  return pe;
}

MaskPlan sample_mask(int n_patches, double ratio, Rng& rng) {
  if (n_patches < 2)
    throw ConfigError("need at least 2 patches to split");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("mask ratio must lie strictly inside (0, 1)");
  int n_visible = int(std::floor(n_patches * (1.0 - ratio)));
  int n_masked = n_patches - n_visible;
  if (n_visible == 0 || n_masked == 0)
    throw ConfigError("mask ratio " + std::to_string(ratio) + " leaves " +
                      (n_visible == 0 ? "no visible" : "no masked") +
                      " patches for N=" + std::to_string(n_patches));

  std::vector<int> perm(static_cast<size_t>(n_patches));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);

  MaskPlan plan;
  plan.ratio = ratio;
  plan.visible.assign(perm.begin(), perm.begin() + n_visible);
  plan.masked.assign(perm.begin() + n_visible, perm.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

}  // namespace m2d
