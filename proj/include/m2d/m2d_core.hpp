#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "m2d/audio_frontend.hpp"
#include "m2d/networks.hpp"
#include "m2d/patching.hpp"

namespace m2d {

struct TauSchedule {
  double tau_start = 0.99995;
  double tau_end = 0.99999;
  long total_steps = 1;
  void validate() const;
};

// Linear interpolation between the endpoints; step must lie in [0, total].
double tau_at(const TauSchedule& schedule, long step);

struct TrainStepReport {
  double loss_m2d = 0.0;
  double loss_off = 0.0;
  double loss_total = 0.0;
  long step = 0;
  double tau_used = 0.0;
};

// Mean over row pairs of 2 - 2*cosine; the target side carries no gradient.
double m2d_loss(const TokenSequence& z_hat_m, const TokenSequence& z_tilde_m);

struct OptimizerConfig {
  double base_lr = 3e-4;
  double lr_scale = 1.0;  // effective batch / 256
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  long warmup_steps = 0;
  long total_steps = 1;
};

// Linear warm-up to base_lr * lr_scale, then cosine decay to zero.
double lr_at(const OptimizerConfig& cfg, long step);

// Per-parameter gradient accumulator keyed by parameter storage.
class GradStore {
 public:
  void add(const Matrix* p, const Matrix& g, double weight = 1.0);
  bool has(const Matrix* p) const;
  const Matrix& get(const Matrix* p) const;
  void clear();

 private:
  std::unordered_map<const Matrix*, Matrix> grads_;
};

// Decoupled weight decay Adam. Decay skips single-row parameters (biases,
// norm terms, the mask token).
class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}

  void register_param(const std::string& name, Matrix* p);
  void register_model(OnlineState& s);
  void step(const GradStore& grads);

  long completed_steps() const { return steps_; }
  void set_completed_steps(long s) { steps_ = s; }
  double last_lr() const { return last_lr_; }
  const OptimizerConfig& config() const { return cfg_; }

  // Moment buffers in registration order, for checkpointing.
  void visit_state(const ParamVisitor& fn);

 private:
  struct Slot {
    std::string name;
    Matrix* param;
    Matrix m, v;
    bool decay;
  };
  OptimizerConfig cfg_;
  std::vector<Slot> slots_;
  long steps_ = 0;
  double last_lr_ = 0.0;
};

enum class Variant { m2d, all_patches_to_target };

// Records what each path consumed, for the wiring assertions: token counts
// plus bit-exact copies of the raw patch rows fed to each branch.
struct StepTrace {
  std::vector<int> online_tokens_per_item;
  std::vector<int> target_tokens_per_item;
  std::vector<Matrix> online_inputs;
  std::vector<Matrix> target_inputs;
};

struct TrainContext {
  EncoderConfig encoder;
  PatchGrid grid;
  Matrix pe;  // full N x D positional table
  TauSchedule schedule;
  Variant variant = Variant::m2d;
};

// Forward over the batch; the joint loss averages over every masked token in
// the batch. Fills `grads` with d loss / d theta when non-null (the target
// branch is gradient-free by construction).
double m2d_forward(TrainContext& ctx, OnlineState& online, TargetState& target,
                   const std::vector<Spectrogram>& batch,
                   const std::vector<MaskPlan>& plans, GradStore* grads,
                   StepTrace* trace = nullptr);

// One full training step: forward, divergence guard, optimizer update on the
// online parameters, then the momentum update of the target.
TrainStepReport train_step(TrainContext& ctx, OnlineState& online, TargetState& target,
                           const std::vector<Spectrogram>& batch,
                           const std::vector<MaskPlan>& plans, AdamW& opt,
                           long step, StepTrace* trace = nullptr);

}  // namespace m2d
