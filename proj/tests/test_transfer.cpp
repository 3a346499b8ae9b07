#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "m2d/errors.hpp"
#include "m2d/rng.hpp"
#include "m2d/transfer.hpp"

using namespace m2d;

namespace {

Matrix random_matrix(Rng& rng, int r, int c) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

PatchGrid grid_of(int n_f, int n_t, int pf = 2, int pt = 2) {
  PatchGrid g;
  g.n_f = n_f;
  g.n_t = n_t;
  g.patch_f = pf;
  g.patch_t = pt;
  return g;
}

}  // namespace

TEST_CASE("frame reshape hits the canonical width") {
  Rng rng(1);
  Matrix z = random_matrix(rng, 190, 768);
  Matrix frames = reshape_timeframe_item(z, grid_of(5, 38));
  CHECK(frames.rows() == 38);
  CHECK(frames.cols() == 3840);
}

TEST_CASE("single-frequency grids copy straight through") {
  Rng rng(2);
  Matrix z = random_matrix(rng, 7, 4);
  Matrix frames = reshape_timeframe_item(z, grid_of(1, 7));
  CHECK((frames.array() == z.array()).all());
}

TEST_CASE("index bookkeeping matches the brute-force table") {
  PatchGrid g = grid_of(2, 3);
  SUBCASE("token value equal to its patch index, D=1") {
    Matrix z(6, 1);
    for (int p = 0; p < 6; ++p) z(p, 0) = p;
    Matrix frames = reshape_timeframe_item(z, g);
    REQUIRE(frames.rows() == 3);
    REQUIRE(frames.cols() == 2);
    for (int t = 0; t < 3; ++t)
      for (int f = 0; f < 2; ++f) CHECK(frames(t, f) == f * 3 + t);
  }
  SUBCASE("full enumeration with D=2") {
    Matrix z(6, 2);
    for (int p = 0; p < 6; ++p)
      for (int d = 0; d < 2; ++d) z(p, d) = 10 * p + d;
    Matrix frames = reshape_timeframe_item(z, g);
    for (int t = 0; t < 3; ++t)
      for (int f = 0; f < 2; ++f)
        for (int d = 0; d < 2; ++d)
          CHECK(frames(t, f * 2 + d) == z(f * 3 + t, d));
  }
}

TEST_CASE("reshape is a norm-preserving bijection") {
  Rng rng(3);
  PatchGrid g = grid_of(5, 38);
  Matrix z = random_matrix(rng, 190, 16);
  Matrix frames = reshape_timeframe_item(z, g);
  CHECK(frames.norm() == doctest::Approx(z.norm()).epsilon(1e-12));
  Matrix back = inverse_reshape_timeframe(frames, g);
  CHECK((back.array() == z.array()).all());
}

TEST_CASE("token-count mismatch is rejected") {
  Rng rng(4);
  CHECK_THROWS_AS(reshape_timeframe_item(random_matrix(rng, 10, 4), grid_of(2, 3)),
                  DimensionError);
}

TEST_CASE("clip pooling") {
  SUBCASE("single frame passes through") {
    FrameFeatures ff;
    ff.data.push_back(Matrix::Constant(1, 6, 2.5));
    auto clip = clip_feature(ff);
    CHECK(clip.data.rows() == 1);
    CHECK((clip.data.array() == 2.5).all());
  }
  SUBCASE("opposite frames cancel") {
    Rng rng(5);
    Matrix v = random_matrix(rng, 1, 8);
    FrameFeatures ff;
    Matrix two(2, 8);
    two.row(0) = v;
    two.row(1) = -v;
    ff.data.push_back(two);
    auto clip = clip_feature(ff);
    CHECK(clip.data.cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("three frames average against a scalar loop") {
    Rng rng(6);
    Matrix f = random_matrix(rng, 3, 5);
    FrameFeatures ff;
    ff.data.push_back(f);
    auto clip = clip_feature(ff);
    for (int j = 0; j < 5; ++j) {
      double acc = (f(0, j) + f(1, j) + f(2, j)) / 3.0;
      CHECK(clip.data(0, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("chunked encoding") {
  Rng rng(7);
  EncoderConfig cfg;
  cfg.depth = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.patch_f = 2;
  cfg.patch_t = 2;
  cfg.predictor_depth = 1;
  cfg.predictor_dim = 8;
  OnlineState online = init_online(cfg, rng);
  PatchGrid grid = grid_of(2, 4);  // trained on 4 x 8 spectrograms
  FeatureExtractor ex = make_extractor(online, cfg, grid);
  const int chunk = 8;

  Spectrogram one;
  one.config = MelConfig{};
  one.data = random_matrix(rng, 4, 8);

  SUBCASE("single chunk equals direct encode plus reshape") {
    auto ff = encode_chunked(ex, one, chunk);
    REQUIRE(ff.data.size() == 1);
    CHECK(ff.data[0].rows() == 4);
    CHECK(ff.data[0].cols() == 2 * 8);

    auto [g, patches] = patchify(one, 2, 2);
    TokenSequence tokens = embed_patches(patches, online.embed.w,
                                         online.embed.b.row(0).transpose());
    TokenSequence encoded = encode(online, cfg, tokens, ex.pe);
    Matrix expect = reshape_timeframe_item(encoded.tokens, grid);
    CHECK((ff.data[0] - expect).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("two chunks double the frame count") {
    Spectrogram two;
    two.config = MelConfig{};
    two.data = random_matrix(rng, 4, 16);
    auto ff = encode_chunked(ex, two, chunk);
    CHECK(ff.data[0].rows() == 8);
  }
  SUBCASE("partial tail is padded; the first chunk is untouched") {
    Spectrogram half;
    half.config = MelConfig{};
    half.data = random_matrix(rng, 4, 12);
    Spectrogram first;
    first.config = MelConfig{};
    first.data = half.data.leftCols(8);

    auto ff_long = encode_chunked(ex, half, chunk);
    auto ff_first = encode_chunked(ex, first, chunk);
    CHECK(ff_long.data[0].rows() == 8);
    CHECK((ff_long.data[0].topRows(4).array() == ff_first.data[0].array()).all());
  }
  SUBCASE("re-running is bit-identical (no hidden randomness)") {
    auto a = encode_chunked(ex, one, chunk);
    auto b = encode_chunked(ex, one, chunk);
    CHECK((a.data[0].array() == b.data[0].array()).all());
  }
  SUBCASE("frames per second follows hop and patch width") {
    auto ff = encode_chunked(ex, one, chunk);
    // 16 kHz, 160-sample hop, 2 frames per patch: 50 patch-frames per second.
    CHECK(ff.frames_per_second == doctest::Approx(50.0));
  }
  SUBCASE("wrong chunk width is rejected") {
    CHECK_THROWS_AS(encode_chunked(ex, one, 6), ConsistencyError);
  }
}

TEST_CASE("positional interpolation along time") {
  PatchGrid g = grid_of(3, 4);
  Matrix pe = make_positional_encoding(g, 8);

  SUBCASE("same width returns the identical table") {
    Matrix out = interpolate_pe(pe, g, 4);
    CHECK((out.array() == pe.array()).all());
  }
  SUBCASE("doubling the frames stays within source bounds per dimension") {
    Matrix out = interpolate_pe(pe, g, 8);
    REQUIRE(out.rows() == 24);
    for (int f = 0; f < 3; ++f) {
      for (int d = 0; d < 8; ++d) {
        double lo = 1e9, hi = -1e9;
        for (int t = 0; t < 4; ++t) {
          lo = std::min(lo, pe(f * 4 + t, d));
          hi = std::max(hi, pe(f * 4 + t, d));
        }
        for (int t = 0; t < 8; ++t) {
          CHECK(out(f * 8 + t, d) >= lo - 1e-12);
          CHECK(out(f * 8 + t, d) <= hi + 1e-12);
        }
      }
    }
  }
  SUBCASE("two-to-three interpolation puts the midpoint in the middle") {
    PatchGrid g2 = grid_of(2, 2);
    Matrix pe2 = make_positional_encoding(g2, 8);
    Matrix out = interpolate_pe(pe2, g2, 3);
    REQUIRE(out.rows() == 6);
    for (int f = 0; f < 2; ++f) {
      Matrix mid = 0.5 * (pe2.row(f * 2) + pe2.row(f * 2 + 1));
      CHECK((out.row(f * 3 + 1) - mid).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((out.row(f * 3) - pe2.row(f * 2)).cwiseAbs().maxCoeff() == 0.0);
      CHECK((out.row(f * 3 + 2) - pe2.row(f * 2 + 1)).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  SUBCASE("collapse to one frame samples the interior") {
    Matrix out = interpolate_pe(pe, g, 1);
    REQUIRE(out.rows() == 3);
    // Midpoint of frames 1 and 2 for a 4-wide axis.
    for (int f = 0; f < 3; ++f) {
      Matrix mid = 0.5 * (pe.row(f * 4 + 1) + pe.row(f * 4 + 2));
      CHECK((out.row(f) - mid).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}
