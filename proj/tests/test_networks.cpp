#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "m2d/errors.hpp"
#include "m2d/networks.hpp"
#include "m2d/patching.hpp"
#include "m2d/rng.hpp"

using namespace m2d;

namespace {

EncoderConfig tiny_config(int depth = 1, int dim = 8, int heads = 2) {
  EncoderConfig cfg;
  cfg.depth = depth;
  cfg.dim = dim;
  cfg.heads = heads;
  cfg.mlp_ratio = 2.0;
  cfg.patch_f = 2;
  cfg.patch_t = 2;
  cfg.predictor_depth = 1;
  cfg.predictor_dim = dim;
  return cfg;
}

Matrix random_matrix(Rng& rng, int r, int c) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

PatchGrid grid_for(int n_f, int n_t) {
  PatchGrid g;
  g.n_f = n_f;
  g.n_t = n_t;
  g.patch_f = 2;
  g.patch_t = 2;
  return g;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("depth zero rejected") {
    cfg.depth = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("dim must divide across heads") {
    cfg.dim = 12;
    cfg.heads = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("dim must be a multiple of 4") {
    cfg.dim = 6;
    cfg.heads = 2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("default predictor width is half the encoder width") {
    cfg.predictor_dim = 0;
    CHECK(cfg.resolved_predictor_dim() == cfg.dim / 2);
  }
}

TEST_CASE("initialization produces finite params and an exact target copy") {
  Rng rng(5);
  auto cfg = tiny_config(2, 8, 2);
  OnlineState online = init_online(cfg, rng);
  CHECK(all_finite(online));
  CHECK(online.encoder.size() == 2);
  CHECK(online.mask_token.rows() == 1);
  CHECK(online.mask_token.cols() == 8);
  // Truncated-normal init keeps weights within two sigma.
  CHECK(online.embed.w.cwiseAbs().maxCoeff() <= 0.04 + 1e-12);
  CHECK(online.embed.b.cwiseAbs().maxCoeff() == 0.0);
  CHECK(online.encoder[0].ln1.gamma.minCoeff() == 1.0);

  TargetState target = init_target_from(online);
  CHECK((target.embed.w.array() == online.embed.w.array()).all());
  CHECK((target.encoder[1].mlp.fc2.w.array() ==
         online.encoder[1].mlp.fc2.w.array()).all());
}

TEST_CASE("parameter visit order is stable and complete") {
  Rng rng(6);
  auto cfg = tiny_config(1, 8, 2);
  OnlineState s = init_online(cfg, rng);
  std::vector<std::string> names;
  visit_params(s, [&](const std::string& n, Matrix&) { names.push_back(n); });
  CHECK(names.front() == "embed.w");
  CHECK(std::find(names.begin(), names.end(), "mask_token") != names.end());
  CHECK(std::find(names.begin(), names.end(), "enc.0.attn.q.w") != names.end());
  CHECK(std::find(names.begin(), names.end(), "pred.out.b") != names.end());
  std::vector<std::string> again;
  visit_params(s, [&](const std::string& n, Matrix&) { again.push_back(n); });
  CHECK(names == again);

  std::vector<std::string> enc_names;
  visit_encoder_params(s, [&](const std::string& n, Matrix&) { enc_names.push_back(n); });
  TargetState t = init_target_from(s);
  std::vector<std::string> tgt_names;
  visit_params(t, [&](const std::string& n, Matrix&) { tgt_names.push_back(n); });
  CHECK(enc_names == tgt_names);
}

TEST_CASE("depth-0 encode is input plus positional rows") {
  auto cfg = tiny_config(1, 8, 2);
  Rng rng(7);
  OnlineState s = init_online(cfg, rng);
  s.encoder.clear();  // degenerate passthrough configuration
  PatchGrid grid = grid_for(2, 3);
  Matrix pe = make_positional_encoding(grid, 8);

  TokenSequence tokens;
  tokens.tokens = random_matrix(rng, 4, 8);
  tokens.positions = {0, 2, 3, 5};
  TokenSequence out = encode(s, cfg, tokens, pe);
  REQUIRE(out.tokens.rows() == 4);
  for (int i = 0; i < 4; ++i) {
    Matrix expect = tokens.tokens.row(i) + pe.row(tokens.positions[size_t(i)]);
    CHECK((out.tokens.row(i) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("encode keeps the token count and positions") {
  auto cfg = tiny_config(2, 8, 2);
  Rng rng(8);
  OnlineState s = init_online(cfg, rng);
  PatchGrid grid = grid_for(5, 38);
  Matrix pe = make_positional_encoding(grid, 8);
  TokenSequence tokens;
  tokens.tokens = random_matrix(rng, 5, 8);
  tokens.positions = {3, 17, 60, 88, 189};
  TokenSequence out = encode(s, cfg, tokens, pe);
  CHECK(out.tokens.rows() == 5);
  CHECK(out.tokens.cols() == 8);
  CHECK(out.positions == tokens.positions);
}

TEST_CASE("encode is permutation-equivariant") {
  auto cfg = tiny_config(2, 8, 2);
  Rng rng(9);
  OnlineState s = init_online(cfg, rng);
  PatchGrid grid = grid_for(3, 4);
  Matrix pe = make_positional_encoding(grid, 8);

  TokenSequence tokens;
  tokens.tokens = random_matrix(rng, 6, 8);
  tokens.positions = {0, 2, 4, 6, 8, 10};
  TokenSequence base = encode(s, cfg, tokens, pe);

  std::vector<int> perm = {5, 2, 0, 4, 1, 3};
  TokenSequence shuffled;
  shuffled.tokens.resize(6, 8);
  shuffled.positions.resize(6);
  for (int i = 0; i < 6; ++i) {
    shuffled.tokens.row(i) = tokens.tokens.row(perm[size_t(i)]);
    shuffled.positions[size_t(i)] = tokens.positions[size_t(perm[size_t(i)])];
  }
  TokenSequence out = encode(s, cfg, shuffled, pe);
  for (int i = 0; i < 6; ++i)
    CHECK((out.tokens.row(i) - base.tokens.row(perm[size_t(i)]))
              .cwiseAbs()
              .maxCoeff() < 1e-5);
}

TEST_CASE("prediction restores patch order and fills masked slots") {
  auto cfg = tiny_config(1, 8, 2);
  Rng rng(10);
  OnlineState s = init_online(cfg, rng);
  PatchGrid grid = grid_for(2, 3);
  Matrix pe = make_positional_encoding(grid, 8);

  MaskPlan plan;
  plan.visible = {0, 2, 4};
  plan.masked = {1, 3, 5};
  plan.ratio = 0.5;

  TokenSequence z_v;
  z_v.tokens = random_matrix(rng, 3, 8);
  z_v.positions = plan.visible;

  SUBCASE("output covers all positions") {
    TokenSequence z_hat = predict(s, cfg, z_v, plan, pe);
    CHECK(z_hat.tokens.rows() == 6);
    CHECK(z_hat.positions == std::vector<int>{0, 1, 2, 3, 4, 5});
  }
  SUBCASE("zero-depth predictor shows mask token plus pe at masked slots") {
    cfg.predictor_depth = 0;
    TokenSequence z_hat = predict(s, cfg, z_v, plan, pe);
    for (int pos : plan.masked) {
      Matrix expect = s.mask_token + pe.row(pos);
      CHECK((z_hat.tokens.row(pos) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    for (size_t i = 0; i < plan.visible.size(); ++i) {
      Matrix expect = z_v.tokens.row(long(i)) + pe.row(plan.visible[i]);
      CHECK((z_hat.tokens.row(plan.visible[i]) - expect).cwiseAbs().maxCoeff() <
            1e-12);
    }
  }
  SUBCASE("masked list order does not change the assembled sequence") {
    cfg.predictor_depth = 0;
    MaskPlan scrambled = plan;
    scrambled.masked = {5, 1, 3};  // same set, non-canonical order
    TokenSequence a = predict(s, cfg, z_v, plan, pe);
    TokenSequence b = predict(s, cfg, z_v, scrambled, pe);
    CHECK((a.tokens - b.tokens).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("plan mismatch raises") {
    z_v.positions = {0, 1, 2};
    CHECK_THROWS_AS(predict(s, cfg, z_v, plan, pe), ConsistencyError);
  }
}

TEST_CASE("filter_masked gathers masked rows in plan order") {
  Rng rng(11);
  TokenSequence z;
  z.tokens = random_matrix(rng, 6, 4);
  z.positions = {0, 1, 2, 3, 4, 5};

  SUBCASE("all but row zero") {
    MaskPlan plan;
    plan.visible = {0};
    plan.masked = {1, 2, 3, 4, 5};
    TokenSequence out = filter_masked(z, plan);
    REQUIRE(out.tokens.rows() == 5);
    for (int i = 0; i < 5; ++i)
      CHECK((out.tokens.row(i) - z.tokens.row(i + 1)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(out.positions == plan.masked);
  }
  SUBCASE("scatter back reconstructs the full sequence") {
    MaskPlan plan;
    plan.visible = {0, 3};
    plan.masked = {1, 2, 4, 5};
    TokenSequence masked = filter_masked(z, plan);
    Matrix rebuilt = Matrix::Zero(6, 4);
    for (size_t i = 0; i < plan.masked.size(); ++i)
      rebuilt.row(plan.masked[i]) = masked.tokens.row(long(i));
    for (int pos : plan.visible) rebuilt.row(pos) = z.tokens.row(pos);
    CHECK((rebuilt - z.tokens).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("split sizes from the canonical ratio") {
    Rng r2(12);
    auto plan = sample_mask(190, 0.7, r2);
    TokenSequence big;
    big.tokens = random_matrix(r2, 190, 4);
    big.positions.resize(190);
    std::iota(big.positions.begin(), big.positions.end(), 0);
    CHECK(filter_masked(big, plan).tokens.rows() == 133);
  }
  SUBCASE("coverage mismatch raises") {
    MaskPlan plan;
    plan.visible = {0, 1};
    plan.masked = {2, 3};
    CHECK_THROWS_AS(filter_masked(z, plan), ConsistencyError);
  }
}

TEST_CASE("per-token standardization") {
  SUBCASE("constant row collapses to zero") {
    TokenSequence z;
    z.tokens = Matrix::Constant(1, 8, 3.25);
    z.positions = {0};
    auto out = standardize_target(z);
    CHECK(out.tokens.cwiseAbs().maxCoeff() < 1e-2);
  }
  SUBCASE("two-value row hits plus and minus one") {
    TokenSequence z;
    z.tokens.resize(1, 2);
    z.tokens << 1.0, 3.0;
    z.positions = {0};
    auto out = standardize_target(z);
    CHECK(out.tokens(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(out.tokens(0, 1) == doctest::Approx(1.0).epsilon(1e-4));
  }
  SUBCASE("rows end up zero-mean unit-variance") {
    Rng rng(13);
    TokenSequence z;
    z.tokens = random_matrix(rng, 5, 64);
    z.positions = {0, 1, 2, 3, 4};
    auto out = standardize_target(z);
    for (int i = 0; i < 5; ++i) {
      double mu = out.tokens.row(i).mean();
      double var = (out.tokens.row(i).array() - mu).square().mean();
      CHECK(std::abs(mu) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
  SUBCASE("idempotent to 1e-5") {
    Rng rng(14);
    TokenSequence z;
    z.tokens = random_matrix(rng, 3, 32);
    z.positions = {0, 1, 2};
    auto once = standardize_target(z);
    auto twice = standardize_target(once);
    CHECK((once.tokens - twice.tokens).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("ema update") {
  Rng rng(15);
  auto cfg = tiny_config(1, 8, 2);
  OnlineState online = init_online(cfg, rng);
  TargetState target = init_target_from(online);
  // Separate the two parameter sets so updates are observable.
  visit_params(target, [](const std::string&, Matrix& m) { m.array() += 1.0; });

  SUBCASE("tau 1 freezes the target") {
    Matrix before = target.embed.w;
    ema_update(target, online, 1.0);
    CHECK((target.embed.w - before).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("tau 0 copies the online encoder") {
    ema_update(target, online, 0.0);
    CHECK((target.embed.w - online.embed.w).cwiseAbs().maxCoeff() == 0.0);
    CHECK((target.encoder[0].attn.v.w - online.encoder[0].attn.v.w)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  SUBCASE("midpoint arithmetic") {
    OnlineState zero = init_online(cfg, rng);
    visit_params(zero, [](const std::string&, Matrix& m) { m.setZero(); });
    TargetState ones = init_target_from(zero);
    visit_params(ones, [](const std::string&, Matrix& m) { m.setOnes(); });
    ema_update(ones, zero, 0.5);
    CHECK(ones.embed.w(0, 0) == doctest::Approx(0.5));
  }
  SUBCASE("contraction at rate tau over 100 steps") {
    double tau = 0.97;
    double d0 = (target.embed.w - online.embed.w).norm();
    for (int k = 1; k <= 100; ++k) {
      ema_update(target, online, tau);
      double dk = (target.embed.w - online.embed.w).norm();
      double expect = std::pow(tau, k) * d0;
      CHECK(std::abs(dk - expect) <= 1e-6 * std::max(1.0, expect));
    }
  }
  SUBCASE("tau outside [0,1] raises") {
    CHECK_THROWS_AS(ema_update(target, online, 1.5), DomainError);
    CHECK_THROWS_AS(ema_update(target, online, -0.1), DomainError);
  }
  SUBCASE("shape mismatch raises") {
    target.embed.w = Matrix::Zero(2, 2);
    CHECK_THROWS_AS(ema_update(target, online, 0.5), ConsistencyError);
  }
}
