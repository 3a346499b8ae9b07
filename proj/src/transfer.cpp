#include "m2d/transfer.hpp"

#include <cmath>

#include "m2d/errors.hpp"

namespace m2d {

Matrix reshape_timeframe_item(const Matrix& z, const PatchGrid& grid) {
  if (z.rows() != grid.n_patches())
    throw DimensionError("token count " + std::to_string(z.rows()) +
                         " does not match the grid (" +
                         std::to_string(grid.n_patches()) + " patches)");
  long d = z.cols();
  Matrix out(grid.n_t, grid.n_f * d);
  for (int f = 0; f < grid.n_f; ++f)
    for (int t = 0; t < grid.n_t; ++t)
      out.row(t).segment(long(f) * d, d) = z.row(long(f) * grid.n_t + t);
  return out;
}

FrameFeatures reshape_timeframe(const std::vector<Matrix>& z, const PatchGrid& grid) {
  FrameFeatures out;
  out.data.reserve(z.size());
  for (const auto& item : z) out.data.push_back(reshape_timeframe_item(item, grid));
  return out;
}

Matrix inverse_reshape_timeframe(const Matrix& frames, const PatchGrid& grid) {
  if (frames.rows() != grid.n_t || frames.cols() % grid.n_f != 0)
    throw DimensionError("frame matrix does not match the grid");
  long d = frames.cols() / grid.n_f;
  Matrix z(grid.n_patches(), d);
  for (int f = 0; f < grid.n_f; ++f)
    for (int t = 0; t < grid.n_t; ++t)
      z.row(long(f) * grid.n_t + t) = frames.row(t).segment(long(f) * d, d);
  return z;
}

ClipFeature clip_feature(const FrameFeatures& frames) {
  if (frames.data.empty()) throw DataError("no frame features to pool");
  ClipFeature out;
  out.data.resize(long(frames.data.size()), frames.data[0].cols());
  for (size_t b = 0; b < frames.data.size(); ++b) {
    if (frames.data[b].rows() < 1)
      throw DataError("clip with zero frames cannot be pooled");
    out.data.row(long(b)) = frames.data[b].colwise().mean();
  }
  return out;
}

FeatureExtractor make_extractor(const OnlineState& online, const EncoderConfig& cfg,
                                const PatchGrid& grid) {
  FeatureExtractor ex;
  ex.cfg = cfg;
  ex.embed = online.embed;
  ex.blocks = online.encoder;
  ex.grid = grid;
  ex.pe = make_positional_encoding(grid, cfg.dim);
  return ex;
}

FrameFeatures encode_chunked(FeatureExtractor& ex, const Spectrogram& audio,
                             int chunk_frames) {
  if (chunk_frames != ex.grid.n_t * ex.grid.patch_t)
    throw ConsistencyError("chunk width must equal the trained input frames");
  if (audio.data.rows() != ex.grid.n_f * ex.grid.patch_f)
    throw DimensionError("spectrogram height does not match the trained grid");

  long total = audio.data.cols();
  long n_chunks = std::max<long>(1, (total + chunk_frames - 1) / chunk_frames);
  Matrix padded = Matrix::Zero(audio.data.rows(), n_chunks * chunk_frames);
  padded.leftCols(total) = audio.data;

  std::vector<int> all_positions(size_t(ex.grid.n_patches()));
  for (int i = 0; i < ex.grid.n_patches(); ++i) all_positions[size_t(i)] = i;

  FrameFeatures out;
  MelConfig mc = audio.config;
  out.frames_per_second =
      double(mc.sample_rate_hz) / double(mc.hop_samples()) / double(ex.grid.patch_t);

  Matrix frames(n_chunks * ex.grid.n_t, long(ex.grid.n_f) * ex.cfg.dim);
  for (long c = 0; c < n_chunks; ++c) {
    Spectrogram chunk;
    chunk.config = audio.config;
    chunk.data = padded.middleCols(c * chunk_frames, chunk_frames);
    auto [grid, patches] = patchify(chunk, ex.grid.patch_f, ex.grid.patch_t);

    Tape t;
    Var z = encode_patches_graph(t, t.input(patches), ex.embed, ex.blocks,
                                 ex.cfg.heads, ex.pe, all_positions);
    frames.middleRows(c * ex.grid.n_t, ex.grid.n_t) =
        reshape_timeframe_item(t.value(z), ex.grid);
  }
  out.data.push_back(std::move(frames));
  return out;
}

Matrix interpolate_pe(const Matrix& pe, const PatchGrid& grid, int new_n_t) {
  if (pe.rows() != grid.n_patches())
    throw DimensionError("positional table does not match the grid");
  if (new_n_t < 1) throw ConfigError("interpolation needs at least one frame");
  if (new_n_t == grid.n_t) return pe;

  Matrix out(long(grid.n_f) * new_n_t, pe.cols());
  for (int f = 0; f < grid.n_f; ++f) {
    for (int j = 0; j < new_n_t; ++j) {
      double src = (new_n_t == 1)
                       ? (grid.n_t - 1) / 2.0
                       : double(j) * double(grid.n_t - 1) / double(new_n_t - 1);
      long lo = long(std::floor(src));
      long hi = std::min<long>(lo + 1, grid.n_t - 1);
      double frac = src - double(lo);
      out.row(long(f) * new_n_t + j) =
          (1.0 - frac) * pe.row(long(f) * grid.n_t + lo) +
          frac * pe.row(long(f) * grid.n_t + hi);
    }
  }
  return out;
}

}  // namespace m2d
