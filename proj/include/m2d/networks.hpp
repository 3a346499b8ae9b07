#pragma once

#include <functional>
#include <string>
#include <vector>

#include "m2d/autodiff.hpp"
#include "m2d/common.hpp"
#include "m2d/patching.hpp"
#include "m2d/rng.hpp"

namespace m2d {

struct EncoderConfig {
  int depth = 2;
  int dim = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  int patch_f = 16;
  int patch_t = 16;
  // Narrower prediction head; predictor_dim 0 means dim / 2. Depth 0 turns
  // the predictor into the identity (test configurations).
  int predictor_depth = 2;
  int predictor_dim = 0;

  int resolved_predictor_dim() const { return predictor_dim > 0 ? predictor_dim : dim / 2; }
  int patch_values() const { return patch_f * patch_t; }
  void validate() const;
};

// Biases and norm terms are stored as 1 x width rows so every parameter is a
// plain matrix for the tape, optimizer, and checkpoint.
struct LinearParams {
  Matrix w;
  Matrix b;
};

struct LayerNormParams {
  Matrix gamma;
  Matrix beta;
};

struct AttentionParams {
  LinearParams q, k, v, o;
};

struct MlpParams {
  LinearParams fc1, fc2;
};

struct BlockParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
};

struct PredictorParams {
  LinearParams in_proj;
  std::vector<BlockParams> blocks;
  LayerNormParams out_ln;
  LinearParams out_proj;
};

struct OnlineState {
  LinearParams embed;
  std::vector<BlockParams> encoder;
  Matrix mask_token;  // 1 x dim, shared across masked positions
  PredictorParams predictor;
};

struct TargetState {
  LinearParams embed;
  std::vector<BlockParams> encoder;
};

// Deterministic name-prefixed enumeration; the visit order is the canonical
// parameter order for the optimizer, EMA, and checkpoints.
using ParamVisitor = std::function<void(const std::string&, Matrix&)>;
void visit_params(OnlineState& s, const ParamVisitor& fn);
// Embed + encoder blocks only: the subset mirrored into the target.
void visit_encoder_params(OnlineState& s, const ParamVisitor& fn);
void visit_params(TargetState& s, const ParamVisitor& fn);

// Truncated-normal (std 0.02) weights, zero biases, unit norm gains.
OnlineState init_online(const EncoderConfig& cfg, Rng& rng);
// Exact copy of the online embed + encoder.
TargetState init_target_from(const OnlineState& online);

bool all_finite(OnlineState& s);

// Graph builders used by the training step. `positions` selects which rows of
// the full positional table are added before the blocks run.
Var linear_graph(Tape& t, Var x, LinearParams& p);
Var blocks_graph(Tape& t, Var x, std::vector<BlockParams>& blocks, int heads);
Var encode_tokens_graph(Tape& t, Var tokens, std::vector<BlockParams>& blocks,
                        int heads, const Matrix& pe, const std::vector<int>& positions);
// Embed raw patch rows then encode: the differentiable path from pixels.
Var encode_patches_graph(Tape& t, Var patches, LinearParams& embed,
                         std::vector<BlockParams>& blocks, int heads,
                         const Matrix& pe, const std::vector<int>& positions);
// Rebuilds the full-length sequence from visible tokens plus mask-token
// copies, adds pe everywhere, and applies the prediction head.
Var predict_graph(Tape& t, Var z_v, OnlineState& s, const EncoderConfig& cfg,
                  const MaskPlan& plan, const Matrix& pe);

// Plain (value-level) counterparts.
TokenSequence encode(OnlineState& s, const EncoderConfig& cfg,
                     const TokenSequence& tokens, const Matrix& pe);
TokenSequence encode(TargetState& s, const EncoderConfig& cfg,
                     const TokenSequence& tokens, const Matrix& pe);
TokenSequence predict(OnlineState& s, const EncoderConfig& cfg,
                      const TokenSequence& z_v, const MaskPlan& plan, const Matrix& pe);
TokenSequence filter_masked(const TokenSequence& z_hat, const MaskPlan& plan);
// Per-token feature standardization: (row - mean) / sqrt(var + 1e-6).
TokenSequence standardize_target(const TokenSequence& z_m);

// p_target <- tau * p_target + (1 - tau) * p_online over embed + encoder.
void ema_update(TargetState& target, OnlineState& online, double tau);

}  // namespace m2d
