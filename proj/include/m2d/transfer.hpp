#pragma once

#include <vector>

#include "m2d/audio_frontend.hpp"
#include "m2d/networks.hpp"
#include "m2d/patching.hpp"

namespace m2d {

// Per-time-frame features: data[b] is N_T x (N_F * D).
struct FrameFeatures {
  std::vector<Matrix> data;
  double frames_per_second = 0.0;
};

// Temporal average of frame features: one row per clip.
struct ClipFeature {
  Matrix data;  // B x (N_F * D)
};

// Token-to-frame rearrangement: out[t, f*D + d] = z[f*N_T + t, d]. Token
// order is frequency-major, matching patchify.
Matrix reshape_timeframe_item(const Matrix& z, const PatchGrid& grid);
FrameFeatures reshape_timeframe(const std::vector<Matrix>& z, const PatchGrid& grid);
// Exact inverse permutation.
Matrix inverse_reshape_timeframe(const Matrix& frames, const PatchGrid& grid);

ClipFeature clip_feature(const FrameFeatures& frames);

// Frozen encoder bundle for inference-time feature extraction.
struct FeatureExtractor {
  EncoderConfig cfg;
  LinearParams embed;
  std::vector<BlockParams> blocks;
  PatchGrid grid;  // grid the encoder was trained on
  Matrix pe;       // positional table for that grid
};

FeatureExtractor make_extractor(const OnlineState& online, const EncoderConfig& cfg,
                                const PatchGrid& grid);

// Encodes every patch (no masking at inference) of each chunk_frames-wide
// slice; the tail is padded with zeros, which is the dataset mean after
// standardization. Chunks are independent and concatenated along time.
FrameFeatures encode_chunked(FeatureExtractor& ex, const Spectrogram& audio,
                             int chunk_frames);

// Linear interpolation of the positional table along the time axis; the
// frequency axis is untouched. new_n_t == n_t returns the input bit-exactly.
Matrix interpolate_pe(const Matrix& pe, const PatchGrid& grid, int new_n_t);

}  // namespace m2d
