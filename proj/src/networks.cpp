#include "m2d/networks.hpp"

#include <cmath>
#include <string>

#include "m2d/errors.hpp"

namespace m2d {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kStdEps = 1e-6;

void visit_linear(const std::string& prefix, LinearParams& p, const ParamVisitor& fn) {
  fn(prefix + ".w", p.w);
  fn(prefix + ".b", p.b);
}

void visit_ln(const std::string& prefix, LayerNormParams& p, const ParamVisitor& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

void visit_block(const std::string& prefix, BlockParams& b, const ParamVisitor& fn) {
  visit_ln(prefix + ".ln1", b.ln1, fn);
  visit_linear(prefix + ".attn.q", b.attn.q, fn);
  visit_linear(prefix + ".attn.k", b.attn.k, fn);
  visit_linear(prefix + ".attn.v", b.attn.v, fn);
  visit_linear(prefix + ".attn.o", b.attn.o, fn);
  visit_ln(prefix + ".ln2", b.ln2, fn);
  visit_linear(prefix + ".mlp.fc1", b.mlp.fc1, fn);
  visit_linear(prefix + ".mlp.fc2", b.mlp.fc2, fn);
}

void visit_blocks(const std::string& prefix, std::vector<BlockParams>& blocks,
                  const ParamVisitor& fn) {
  for (size_t i = 0; i < blocks.size(); ++i)
    visit_block(prefix + "." + std::to_string(i), blocks[i], fn);
}

LinearParams alloc_linear(int in, int out) {
  LinearParams p;
  p.w = Matrix::Zero(in, out);
  p.b = Matrix::Zero(1, out);
  return p;
}

LayerNormParams alloc_ln(int dim) {
  LayerNormParams p;
  p.gamma = Matrix::Ones(1, dim);
  p.beta = Matrix::Zero(1, dim);
  return p;
}

BlockParams alloc_block(int dim, double mlp_ratio) {
  BlockParams b;
  b.ln1 = alloc_ln(dim);
  b.attn.q = alloc_linear(dim, dim);
  b.attn.k = alloc_linear(dim, dim);
  b.attn.v = alloc_linear(dim, dim);
  b.attn.o = alloc_linear(dim, dim);
  b.ln2 = alloc_ln(dim);
  int hidden = int(std::lround(dim * mlp_ratio));
  b.mlp.fc1 = alloc_linear(dim, hidden);
  b.mlp.fc2 = alloc_linear(hidden, dim);
  return b;
}

// Weight fills keyed by the visit-name suffix; norm terms keep their
// identity-at-init values.
void fill_params(OnlineState& s, Rng& rng) {
  visit_params(s, [&rng](const std::string& name, Matrix& m) {
    auto ends_with = [&name](const char* suffix) {
      std::string suf(suffix);
      return name.size() >= suf.size() &&
             name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with(".w") || name == "mask_token") {
      for (long i = 0; i < m.rows(); ++i)
        for (long j = 0; j < m.cols(); ++j) m(i, j) = rng.trunc_normal(0.02);
    }
  });
}

Var attention_graph(Tape& t, Var x, AttentionParams& p, int heads) {
  long dim = t.value(x).cols();
  if (dim % heads != 0) throw DimensionError("attention width must split across heads");
  int dh = int(dim) / heads;
  Var q = linear_graph(t, x, p.q);
  Var k = linear_graph(t, x, p.k);
  Var v = linear_graph(t, x, p.v);
  Var merged{};
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh)));
    Var out = t.matmul(t.softmax_rows(scores), vh);
    merged = (h == 0) ? out : t.concat_cols(merged, out);
  }
  return linear_graph(t, merged, p.o);
}

Var block_graph(Tape& t, Var x, BlockParams& b, int heads) {
  Var g1 = t.param(&b.ln1.gamma), b1 = t.param(&b.ln1.beta);
  Var h = t.add(x, attention_graph(t, t.layer_norm(x, g1, b1, kLnEps), b.attn, heads));
  Var g2 = t.param(&b.ln2.gamma), b2 = t.param(&b.ln2.beta);
  Var ln2 = t.layer_norm(h, g2, b2, kLnEps);
  Var mlp = linear_graph(t, t.gelu(linear_graph(t, ln2, b.mlp.fc1)), b.mlp.fc2);
  return t.add(h, mlp);
}

}  // namespace

void EncoderConfig::validate() const {
  if (depth < 1) throw ConfigError("encoder depth must be at least 1");
  if (dim <= 0 || dim % 4 != 0)
    throw ConfigError("encoder dim must be a positive multiple of 4");
  if (heads <= 0 || dim % heads != 0)
    throw ConfigError("encoder dim must be divisible by heads");
  if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
  if (patch_f <= 0 || patch_t <= 0) throw ConfigError("patch sizes must be positive");
  if (predictor_depth < 0) throw ConfigError("predictor depth cannot be negative");
  if (predictor_depth > 0 && resolved_predictor_dim() % heads != 0)
    throw ConfigError("predictor dim must be divisible by heads");
}

void visit_params(OnlineState& s, const ParamVisitor& fn) {
  visit_linear("embed", s.embed, fn);
  visit_blocks("enc", s.encoder, fn);
  fn("mask_token", s.mask_token);
  if (!s.predictor.blocks.empty() || s.predictor.in_proj.w.size() > 0) {
    visit_linear("pred.in", s.predictor.in_proj, fn);
    visit_blocks("pred", s.predictor.blocks, fn);
    visit_ln("pred.ln", s.predictor.out_ln, fn);
    visit_linear("pred.out", s.predictor.out_proj, fn);
  }
}

void visit_encoder_params(OnlineState& s, const ParamVisitor& fn) {
  visit_linear("embed", s.embed, fn);
  visit_blocks("enc", s.encoder, fn);
}

void visit_params(TargetState& s, const ParamVisitor& fn) {
  visit_linear("embed", s.embed, fn);
  visit_blocks("enc", s.encoder, fn);
}

OnlineState init_online(const EncoderConfig& cfg, Rng& rng) {
  OnlineState s;
  s.embed = alloc_linear(cfg.patch_values(), cfg.dim);
  for (int i = 0; i < cfg.depth; ++i)
    s.encoder.push_back(alloc_block(cfg.dim, cfg.mlp_ratio));
  s.mask_token = Matrix::Zero(1, cfg.dim);
  if (cfg.predictor_depth > 0) {
    int pdim = cfg.resolved_predictor_dim();
    s.predictor.in_proj = alloc_linear(cfg.dim, pdim);
    for (int i = 0; i < cfg.predictor_depth; ++i)
      s.predictor.blocks.push_back(alloc_block(pdim, cfg.mlp_ratio));
    s.predictor.out_ln = alloc_ln(pdim);
    s.predictor.out_proj = alloc_linear(pdim, cfg.dim);
  }
  fill_params(s, rng);
  return s;
}

TargetState init_target_from(const OnlineState& online) {
  TargetState t;
  t.embed = online.embed;
  t.encoder = online.encoder;
  return t;
}

bool all_finite(OnlineState& s) {
  bool ok = true;
  visit_params(s, [&ok](const std::string&, Matrix& m) {
    if (!m.allFinite()) ok = false;
  });
  return ok;
}

Var linear_graph(Tape& t, Var x, LinearParams& p) {
  return t.add_row(t.matmul(x, t.param(&p.w)), t.param(&p.b));
}

Var blocks_graph(Tape& t, Var x, std::vector<BlockParams>& blocks, int heads) {
  for (auto& b : blocks) x = block_graph(t, x, b, heads);
  return x;
}

Var encode_tokens_graph(Tape& t, Var tokens, std::vector<BlockParams>& blocks,
                        int heads, const Matrix& pe, const std::vector<int>& positions) {
  if (t.value(tokens).cols() != pe.cols())
    throw DimensionError("token width does not match the positional table");
  Matrix pe_rows(long(positions.size()), pe.cols());
  for (size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] >= pe.rows())
      throw DimensionError("token position outside the positional table");
    pe_rows.row(long(i)) = pe.row(positions[i]);
  }
  Var x = t.add(tokens, t.input(pe_rows));
  return blocks_graph(t, x, blocks, heads);
}

Var encode_patches_graph(Tape& t, Var patches, LinearParams& embed,
                         std::vector<BlockParams>& blocks, int heads,
                         const Matrix& pe, const std::vector<int>& positions) {
  return encode_tokens_graph(t, linear_graph(t, patches, embed), blocks, heads,
                             pe, positions);
}

Var predict_graph(Tape& t, Var z_v, OnlineState& s, const EncoderConfig& cfg,
                  const MaskPlan& plan, const Matrix& pe) {
  long n_visible = t.value(z_v).rows();
  if (n_visible != long(plan.visible.size()))
    throw ConsistencyError("visible tokens do not match the mask plan");
  int n = int(plan.visible.size() + plan.masked.size());

  Var mask_rows = t.repeat_row(t.param(&s.mask_token), int(plan.masked.size()));
  Var stacked = t.concat_rows(z_v, mask_rows);
  // Restore original patch order: position -> row inside [z_v ; mask rows].
  std::vector<int> order(size_t(n), -1);
  for (size_t i = 0; i < plan.visible.size(); ++i)
    order[size_t(plan.visible[i])] = int(i);
  for (size_t j = 0; j < plan.masked.size(); ++j)
    order[size_t(plan.masked[j])] = int(plan.visible.size() + j);
  for (int v : order)
    if (v < 0) throw ConsistencyError("mask plan does not cover every patch");
  Var full = t.gather_rows(stacked, order);

  Matrix pe_rows(n, pe.cols());
  for (int i = 0; i < n; ++i) pe_rows.row(i) = pe.row(i);
  Var x = t.add(full, t.input(pe_rows));

  if (cfg.predictor_depth == 0) return x;
  Var h = linear_graph(t, x, s.predictor.in_proj);
  h = blocks_graph(t, h, s.predictor.blocks, cfg.heads);
  Var g = t.param(&s.predictor.out_ln.gamma), b = t.param(&s.predictor.out_ln.beta);
  h = t.layer_norm(h, g, b, kLnEps);
  return linear_graph(t, h, s.predictor.out_proj);
}

namespace {

TokenSequence run_encode(std::vector<BlockParams>& blocks, int heads,
                         const TokenSequence& tokens, const Matrix& pe) {
  Tape t;
  Var out = encode_tokens_graph(t, t.input(tokens.tokens), blocks, heads, pe,
                                tokens.positions);
  TokenSequence res;
  res.tokens = t.value(out);
  res.positions = tokens.positions;
  return res;
}

}  // namespace

TokenSequence encode(OnlineState& s, const EncoderConfig& cfg,
                     const TokenSequence& tokens, const Matrix& pe) {
  return run_encode(s.encoder, cfg.heads, tokens, pe);
}

TokenSequence encode(TargetState& s, const EncoderConfig& cfg,
                     const TokenSequence& tokens, const Matrix& pe) {
  return run_encode(s.encoder, cfg.heads, tokens, pe);
}

TokenSequence predict(OnlineState& s, const EncoderConfig& cfg,
                      const TokenSequence& z_v, const MaskPlan& plan, const Matrix& pe) {
  if (z_v.positions != plan.visible)
    throw ConsistencyError("visible token positions disagree with the plan");
  Tape t;
  Var out = predict_graph(t, t.input(z_v.tokens), s, cfg, plan, pe);
  TokenSequence res;
  res.tokens = t.value(out);
  res.positions.resize(plan.visible.size() + plan.masked.size());
  for (size_t i = 0; i < res.positions.size(); ++i) res.positions[i] = int(i);
  return res;
}

TokenSequence filter_masked(const TokenSequence& z_hat, const MaskPlan& plan) {
  long n = long(plan.visible.size() + plan.masked.size());
  if (z_hat.tokens.rows() != n)
    throw ConsistencyError("expected tokens covering every patch position");
  TokenSequence out;
  out.tokens.resize(long(plan.masked.size()), z_hat.tokens.cols());
  out.positions = plan.masked;
  for (size_t i = 0; i < plan.masked.size(); ++i)
    out.tokens.row(long(i)) = z_hat.tokens.row(plan.masked[i]);
  return out;
}

TokenSequence standardize_target(const TokenSequence& z_m) {
  if (z_m.tokens.rows() == 0) throw DataError("cannot standardize an empty sequence");
  TokenSequence out;
  out.positions = z_m.positions;
  out.tokens.resizeLike(z_m.tokens);
  for (long i = 0; i < z_m.tokens.rows(); ++i) {
    double mu = z_m.tokens.row(i).mean();
    double var = (z_m.tokens.row(i).array() - mu).square().mean();
    out.tokens.row(i) =
        ((z_m.tokens.row(i).array() - mu) / std::sqrt(var + kStdEps)).matrix();
  }
  return out;
}

void ema_update(TargetState& target, OnlineState& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0))
    throw DomainError("ema coefficient must lie in [0, 1]");
  std::vector<Matrix*> online_params;
  visit_encoder_params(online, [&](const std::string&, Matrix& m) {
    online_params.push_back(&m);
  });
  size_t k = 0;
  visit_params(target, [&](const std::string& name, Matrix& m) {
    if (k >= online_params.size())
      throw ConsistencyError("online/target parameter lists diverge");
    Matrix& src = *online_params[k++];
    if (src.rows() != m.rows() || src.cols() != m.cols())
      throw ConsistencyError("shape mismatch for " + name);
    m = tau * m + (1.0 - tau) * src;
  });
  if (k != online_params.size())
    throw ConsistencyError("online/target parameter lists diverge");
}

}  // namespace m2d
