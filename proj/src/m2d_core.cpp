#include "m2d/m2d_core.hpp"

#include <cmath>

#include "m2d/errors.hpp"

namespace m2d {

void TauSchedule::validate() const {
  if (!(tau_start >= 0.0 && tau_start <= tau_end && tau_end <= 1.0))
    throw ConfigError("momentum schedule needs 0 <= start <= end <= 1");
  if (total_steps < 1) throw ConfigError("schedule needs at least one step");
}

double tau_at(const TauSchedule& schedule, long step) {
  schedule.validate();
  if (step < 0 || step > schedule.total_steps)
    throw DomainError("schedule step " + std::to_string(step) +
                      " outside [0, " + std::to_string(schedule.total_steps) + "]");
  return schedule.tau_start + (schedule.tau_end - schedule.tau_start) *
                                  double(step) / double(schedule.total_steps);
}

double m2d_loss(const TokenSequence& z_hat_m, const TokenSequence& z_tilde_m) {
  Tape t;
  Var loss = t.cosine_mse_rows(t.input(z_hat_m.tokens), t.input(z_tilde_m.tokens));
  return t.value(loss)(0, 0);
}

double lr_at(const OptimizerConfig& cfg, long step) {
  double peak = cfg.base_lr * cfg.lr_scale;
  if (step < cfg.warmup_steps)
    return peak * double(step + 1) / double(cfg.warmup_steps);
  long span = std::max<long>(1, cfg.total_steps - cfg.warmup_steps);
  double progress = double(step - cfg.warmup_steps) / double(span);
  if (progress > 1.0) progress = 1.0;
  return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void GradStore::add(const Matrix* p, const Matrix& g, double weight) {
  auto it = grads_.find(p);
  if (it == grads_.end())
    grads_.emplace(p, g * weight);
  else {
    if (it->second.rows() != g.rows() || it->second.cols() != g.cols())
      throw ConsistencyError("gradient shape changed between accumulations");
    it->second += g * weight;
  }
}

bool GradStore::has(const Matrix* p) const { return grads_.count(p) > 0; }

const Matrix& GradStore::get(const Matrix* p) const {
  auto it = grads_.find(p);
  if (it == grads_.end()) throw ConsistencyError("no gradient stored for parameter");
  return it->second;
}

void GradStore::clear() { grads_.clear(); }

void AdamW::register_param(const std::string& name, Matrix* p) {
  Slot s;
  s.name = name;
  s.param = p;
  s.m = Matrix::Zero(p->rows(), p->cols());
  s.v = Matrix::Zero(p->rows(), p->cols());
  s.decay = p->rows() > 1;  // single-row params are bias-like
  slots_.push_back(std::move(s));
}

void AdamW::register_model(OnlineState& s) {
  visit_params(s, [this](const std::string& name, Matrix& m) {
    register_param(name, &m);
  });
}

void AdamW::step(const GradStore& grads) {
  double lr = lr_at(cfg_, steps_);
  last_lr_ = lr;
  long t = steps_ + 1;
  double bc1 = 1.0 - std::pow(cfg_.beta1, double(t));
  double bc2 = 1.0 - std::pow(cfg_.beta2, double(t));
  for (auto& s : slots_) {
    if (!grads.has(s.param)) continue;
    const Matrix& g = grads.get(s.param);
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * g;
    s.v = cfg_.beta2 * s.v.array().matrix() +
          (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Matrix mhat = s.m / bc1;
    Matrix vhat = s.v / bc2;
    *s.param -= lr * (mhat.array() / (vhat.array().sqrt() + cfg_.eps)).matrix();
    if (s.decay && cfg_.weight_decay > 0.0)
      *s.param -= lr * cfg_.weight_decay * (*s.param);
  }
  ++steps_;
}

void AdamW::visit_state(const ParamVisitor& fn) {
  for (auto& s : slots_) {
    fn("opt." + s.name + ".m", s.m);
    fn("opt." + s.name + ".v", s.v);
  }
}

namespace {

// Gathers the raw patch rows listed in `rows`.
Matrix take_rows(const Matrix& patches, const std::vector<int>& rows) {
  Matrix out(long(rows.size()), patches.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(long(i)) = patches.row(rows[i]);
  return out;
}

}  // namespace

double m2d_forward(TrainContext& ctx, OnlineState& online, TargetState& target,
                   const std::vector<Spectrogram>& batch,
                   const std::vector<MaskPlan>& plans, GradStore* grads,
                   StepTrace* trace) {
  if (batch.empty()) throw DataError("empty training batch");
  if (batch.size() != plans.size())
    throw ConsistencyError("one mask plan per batch item required");

  long total_masked = 0;
  for (const auto& p : plans) total_masked += long(p.masked.size());
  if (total_masked == 0) throw DataError("no masked tokens in the batch");

  // Target parameters ride along so callers can assert their gradients are
  // identically zero; the optimizer never registers them.
  std::vector<Matrix*> params;
  visit_params(online, [&](const std::string&, Matrix& m) { params.push_back(&m); });
  visit_params(target, [&](const std::string&, Matrix& m) { params.push_back(&m); });

  double joint_loss = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    auto [grid, patches] = patchify(batch[i], ctx.encoder.patch_f, ctx.encoder.patch_t);
    if (grid.n_f != ctx.grid.n_f || grid.n_t != ctx.grid.n_t)
      throw ConsistencyError("batch item does not match the configured grid");
    const MaskPlan& plan = plans[i];

    Tape t;
    // Online path sees only visible patch content.
    Var visible = t.input(take_rows(patches, plan.visible));
    if (trace) trace->online_inputs.push_back(t.value(visible));
    Var z_v = encode_patches_graph(t, visible, online.embed, online.encoder,
                                   ctx.encoder.heads, ctx.pe, plan.visible);
    Var z_hat = predict_graph(t, z_v, online, ctx.encoder, plan, ctx.pe);
    Var z_hat_m = t.gather_rows(z_hat, plan.masked);

    // Target path: masked patches only, or the full set under the
    // conventional variant; either way the branch is cut before the loss.
    Var z_t_m{};
    if (ctx.variant == Variant::m2d) {
      Var masked = t.input(take_rows(patches, plan.masked));
      if (trace) {
        trace->target_tokens_per_item.push_back(int(plan.masked.size()));
        trace->target_inputs.push_back(t.value(masked));
      }
      z_t_m = encode_patches_graph(t, masked, target.embed, target.encoder,
                                   ctx.encoder.heads, ctx.pe, plan.masked);
    } else {
      std::vector<int> all(size_t(grid.n_patches()));
      for (int k = 0; k < grid.n_patches(); ++k) all[size_t(k)] = k;
      Var full = t.input(patches);
      if (trace) {
        trace->target_tokens_per_item.push_back(grid.n_patches());
        trace->target_inputs.push_back(t.value(full));
      }
      Var z_t = encode_patches_graph(t, full, target.embed, target.encoder,
                                     ctx.encoder.heads, ctx.pe, all);
      z_t_m = t.gather_rows(z_t, plan.masked);
    }
    if (trace) trace->online_tokens_per_item.push_back(int(plan.visible.size()));
    Var z_tilde_m = t.detach(t.standardize_rows(z_t_m, 1e-6));

    Var item_loss = t.cosine_mse_rows(z_hat_m, z_tilde_m);
    double w = double(plan.masked.size()) / double(total_masked);
    joint_loss += w * t.value(item_loss)(0, 0);

    if (grads) {
      Var scaled = t.scale(item_loss, w);
      t.backward(scaled);
      for (Matrix* p : params) grads->add(p, t.param_grad(p));
    }
  }
  return joint_loss;
}

TrainStepReport train_step(TrainContext& ctx, OnlineState& online, TargetState& target,
                           const std::vector<Spectrogram>& batch,
                           const std::vector<MaskPlan>& plans, AdamW& opt,
                           long step, StepTrace* trace) {
  GradStore grads;
  double loss = m2d_forward(ctx, online, target, batch, plans, &grads, trace);
  if (!std::isfinite(loss) || loss > 4.0 + 1e-3)
    throw DivergenceError(step, "masked-prediction loss " + std::to_string(loss));

  opt.step(grads);
  double tau = tau_at(ctx.schedule, step);
  ema_update(target, online, tau);

  TrainStepReport report;
  report.loss_m2d = loss;
  report.loss_off = 0.0;
  report.loss_total = loss;
  report.step = step;
  report.tau_used = tau;
  return report;
}

}  // namespace m2d
