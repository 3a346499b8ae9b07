#pragma once

#include <utility>
#include <vector>

#include "m2d/audio_frontend.hpp"
#include "m2d/common.hpp"
#include "m2d/rng.hpp"

namespace m2d {

struct PatchGrid {
  int patch_f = 16;
  int patch_t = 16;
  int n_f = 0;  // patches along frequency
  int n_t = 0;  // patches along time
  int n_patches() const { return n_f * n_t; }
};

// Exclusive partition of patch indices. Both lists are kept sorted ascending
// so downstream gathers are reproducible.
struct MaskPlan {
  std::vector<int> visible;
  std::vector<int> masked;
  double ratio = 0.0;
};

struct TokenSequence {
  Matrix tokens;               // n x D
  std::vector<int> positions;  // patch indices into the grid, length n
};

// Splits an F x T spectrogram into non-overlapping patches. Row i of the
// returned matrix is the row-major flattening of grid cell
// (i / n_t, i % n_t); patch order is frequency-major. Dimensions must tile
// exactly.
std::pair<PatchGrid, Matrix> patchify(const Spectrogram& spec, int patch_f, int patch_t);

// Inverse of patchify; reassembles the F x T matrix.
Matrix unpatchify(const PatchGrid& grid, const Matrix& patches);

// tokens = patches * weight + bias; positions = 0..N-1.
TokenSequence embed_patches(const Matrix& patches, const Matrix& weight, const Vector& bias);

// Fixed 2-D sinusoidal code: per grid cell (f, t), the row concatenates the
// sin/cos code of f (first dim/2 columns) with the code of t (last dim/2).
// dim must be divisible by 4.
Matrix make_positional_encoding(const PatchGrid& grid, int dim);

// Uniformly random visible/masked split with |visible| = floor(N*(1-ratio)).
// Degenerate splits (either side empty) are rejected.
MaskPlan sample_mask(int n_patches, double ratio, Rng& rng);

}  // namespace m2d
