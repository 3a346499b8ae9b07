#include "m2d/m2d_x.hpp"

#include <cmath>
#include <string>

#include "m2d/errors.hpp"

namespace m2d {

void OfflineConfig::validate(bool has_teacher) const {
  if (lambda_m2d < 0.0 || lambda_off < 0.0)
    throw ConfigError("loss weights must be non-negative");
  if (lambda_m2d + lambda_off <= 0.0)
    throw ConfigError("at least one loss weight must be positive");
  if (eta < 0.0 || eta > 1.0)
    throw ConfigError("background blend ratio must lie in [0, 1]");
  switch (scenario) {
    case Scenario::supervised:
      if (n_classes < 2) throw ConfigError("supervised scenario needs n_classes >= 2");
      break;
    case Scenario::distill:
    case Scenario::regularize:
      if (!has_teacher)
        throw ConfigError("distill and regularize scenarios need a frozen teacher");
      break;
  }
}

FrozenEncoderTeacher::FrozenEncoderTeacher(FeatureExtractor ex, int chunk_frames, int layer)
    : ex_(std::move(ex)), chunk_frames_(chunk_frames) {
  if (chunk_frames_ <= 0 || chunk_frames_ % ex_.cfg.patch_t != 0)
    throw ConfigError("teacher chunk width must be a positive multiple of patch_t");
  if (layer >= 0) {
    if (layer > int(ex_.blocks.size()))
      throw ConfigError("teacher layer exceeds encoder depth");
    ex_.blocks.resize(size_t(layer));
    ex_.cfg.depth = layer;
  }
}

Matrix FrozenEncoderTeacher::frames(const Spectrogram& clean) {
  return encode_chunked(ex_, clean, chunk_frames_).data.at(0);
}

long FrozenEncoderTeacher::feature_dim() const {
  return long(ex_.grid.n_f) * long(ex_.cfg.dim);
}

void OfflineBatch::validate(Scenario scenario) const {
  if (x_noisy.empty()) throw DataError("empty training batch");
  switch (scenario) {
    case Scenario::supervised:
      if (y_label.rows() != long(x_noisy.size()))
        throw DimensionError("one label row per batch item required");
      break;
    case Scenario::distill:
    case Scenario::regularize:
      if (y_audio.size() != x_noisy.size())
        throw DimensionError("one clean clip per batch item required");
      break;
  }
}

MapperParams init_mapper(int in_dim, int out_dim, Rng& rng) {
  if (in_dim <= 0 || out_dim <= 0) throw ConfigError("mapper dimensions must be positive");
  MapperParams m;
  m.lin.w = Matrix(in_dim, out_dim);
  for (int i = 0; i < in_dim; ++i)
    for (int j = 0; j < out_dim; ++j) m.lin.w(i, j) = rng.trunc_normal(0.02);
  m.lin.b = Matrix::Zero(1, out_dim);
  return m;
}

namespace {

// Inverse permutation: slot for every patch position, visible rows first in
// the stacked [z_v; z_hat_m] layout. Throws on duplicates or gaps.
std::vector<int> stacked_order(const MaskPlan& plan, int n_patches) {
  std::vector<int> slot(size_t(n_patches), -1);
  int row = 0;
  for (int pos : plan.visible) {
    if (pos < 0 || pos >= n_patches) throw DomainError("patch position out of range");
    if (slot[size_t(pos)] != -1) throw ConsistencyError("patch position covered twice");
    slot[size_t(pos)] = row++;
  }
  for (int pos : plan.masked) {
    if (pos < 0 || pos >= n_patches) throw DomainError("patch position out of range");
    if (slot[size_t(pos)] != -1) throw ConsistencyError("patch position covered twice");
    slot[size_t(pos)] = row++;
  }
  for (int pos = 0; pos < n_patches; ++pos)
    if (slot[size_t(pos)] == -1)
      throw ConsistencyError("patch position " + std::to_string(pos) +
                             " covered by neither branch");
  return slot;
}

}  // namespace

Matrix assemble_audio_feature(const TokenSequence& z_v, const TokenSequence& z_hat_m,
                              const MaskPlan& plan, const PatchGrid& grid) {
  const int n = grid.n_patches();
  if (long(plan.visible.size()) != z_v.tokens.rows() ||
      long(plan.masked.size()) != z_hat_m.tokens.rows())
    throw DimensionError("token counts disagree with the mask plan");
  if (!plan.masked.empty() && z_v.tokens.cols() != z_hat_m.tokens.cols())
    throw DimensionError("visible and predicted tokens have different widths");

  Matrix full(n, z_v.tokens.cols());
  std::vector<bool> covered(size_t(n), false);
  auto place = [&](const Matrix& tokens, const std::vector<int>& positions) {
    for (long i = 0; i < tokens.rows(); ++i) {
      int pos = positions[size_t(i)];
      if (pos < 0 || pos >= n) throw DomainError("patch position out of range");
      if (covered[size_t(pos)]) throw ConsistencyError("patch position covered twice");
      covered[size_t(pos)] = true;
      full.row(pos) = tokens.row(i);
    }
  };
  place(z_v.tokens, plan.visible);
  place(z_hat_m.tokens, plan.masked);
  for (int pos = 0; pos < n; ++pos)
    if (!covered[size_t(pos)])
      throw ConsistencyError("patch position " + std::to_string(pos) +
                             " covered by neither branch");
  return reshape_timeframe_item(full, grid);
}

Var reshape_timeframe_graph(Tape& t, Var z, const PatchGrid& grid) {
  if (t.value(z).rows() != grid.n_patches())
    throw DimensionError("token count does not match the grid");
  Var out{};
  for (int f = 0; f < grid.n_f; ++f) {
    std::vector<int> rows(size_t(grid.n_t));
    for (int i = 0; i < grid.n_t; ++i) rows[size_t(i)] = f * grid.n_t + i;
    Var band = t.gather_rows(z, rows);
    out = (f == 0) ? band : t.concat_cols(out, band);
  }
  return out;
}

Var assemble_audio_feature_graph(Tape& t, Var z_v, Var z_hat_m, const MaskPlan& plan,
                                 const PatchGrid& grid) {
  std::vector<int> slot = stacked_order(plan, grid.n_patches());
  Var stacked = plan.masked.empty() ? z_v : t.concat_rows(z_v, z_hat_m);
  Var ordered = t.gather_rows(stacked, slot);
  return reshape_timeframe_graph(t, ordered, grid);
}

double offline_supervised_loss(const std::vector<Matrix>& h_hat, const Matrix& y_label,
                               MapperParams& mapper) {
  if (h_hat.empty()) throw DataError("no feature items");
  if (y_label.rows() != long(h_hat.size()))
    throw DimensionError("one label row per feature item required");
  if (y_label.cols() != mapper.lin.w.cols())
    throw DimensionError("label width does not match the mapper output");
  double total = 0.0;
  for (size_t i = 0; i < h_hat.size(); ++i) {
    if (h_hat[i].cols() != mapper.lin.w.rows())
      throw DimensionError("feature width does not match the mapper input");
    Tape t;
    Var logits = linear_graph(t, t.mean_rows(t.input(h_hat[i])), mapper.lin);
    Var loss = t.bce_with_logits(logits, t.input(y_label.row(long(i))));
    total += t.value(loss)(0, 0);
  }
  return total / double(h_hat.size());
}

double offline_distill_loss(const std::vector<Matrix>& h_hat,
                            const std::vector<Matrix>& teacher_frames,
                            MapperParams& mapper) {
  if (h_hat.empty()) throw DataError("no feature items");
  if (teacher_frames.size() != h_hat.size())
    throw DimensionError("one teacher item per feature item required");
  long total_frames = 0;
  for (const auto& h : h_hat) total_frames += h.rows();
  if (total_frames == 0) throw DataError("no frames to distill");
  double total = 0.0;
  for (size_t i = 0; i < h_hat.size(); ++i) {
    if (h_hat[i].cols() != mapper.lin.w.rows())
      throw DimensionError("feature width does not match the mapper input");
    if (teacher_frames[i].cols() != mapper.lin.w.cols())
      throw DimensionError("teacher width does not match the mapper output");
    if (teacher_frames[i].rows() != h_hat[i].rows())
      throw DimensionError("student and teacher frame counts disagree; align first");
    Tape t;
    Var mapped = linear_graph(t, t.input(h_hat[i]), mapper.lin);
    Var loss = t.cosine_mse_rows(mapped, t.input(teacher_frames[i]));
    total += t.value(loss)(0, 0) * double(h_hat[i].rows()) / double(total_frames);
  }
  return total;
}

Matrix align_teacher_frames(const Matrix& teacher, long student_frames) {
  if (teacher.rows() < 1) throw DataError("teacher produced no frames");
  if (student_frames < 1) throw DomainError("student frame count must be positive");
  if (teacher.rows() == student_frames) return teacher;
  Matrix out(student_frames, teacher.cols());
  const long n = teacher.rows();
  for (long i = 0; i < student_frames; ++i) {
    double pos = (student_frames == 1)
                     ? double(n - 1) / 2.0
                     : double(i) * double(n - 1) / double(student_frames - 1);
    long lo = long(std::floor(pos));
    long hi = std::min(lo + 1, n - 1);
    double w = pos - double(lo);
    out.row(i) = (1.0 - w) * teacher.row(lo) + w * teacher.row(hi);
  }
  return out;
}

double combined_loss(double l_m2d, double l_off, const OfflineConfig& cfg) {
  return cfg.lambda_m2d * l_m2d + cfg.lambda_off * l_off;
}

RegularizeSetup regularize_setup(const OnlineState& original, const EncoderConfig& cfg,
                                 const PatchGrid& grid, int chunk_frames) {
  RegularizeSetup s;
  s.online_init = original;
  s.teacher = std::make_unique<FrozenEncoderTeacher>(
      make_extractor(original, cfg, grid), chunk_frames);
  return s;
}

namespace {

Matrix take_rows(const Matrix& patches, const std::vector<int>& rows) {
  Matrix out(long(rows.size()), patches.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(long(i)) = patches.row(rows[i]);
  return out;
}

}  // namespace

XForwardResult m2dx_forward(XContext& ctx, OnlineState& online, TargetState& target,
                            MapperParams& mapper, const OfflineBatch& batch,
                            const std::vector<MaskPlan>& plans, GradStore* grads,
                            XTrace* trace) {
  ctx.offline.validate(ctx.teacher != nullptr);
  batch.validate(ctx.offline.scenario);
  if (batch.x_noisy.size() != plans.size())
    throw ConsistencyError("one mask plan per batch item required");
  const bool supervised = ctx.offline.scenario == Scenario::supervised;
  if (supervised && ctx.offline.n_classes != int(mapper.lin.w.cols()))
    throw DimensionError("mapper output width does not match n_classes");

  long total_masked = 0;
  for (const auto& p : plans) total_masked += long(p.masked.size());
  if (total_masked == 0) throw DataError("no masked tokens in the batch");
  long total_frames = long(batch.x_noisy.size()) * long(ctx.core.grid.n_t);

  // Teacher parameters are never placed on the tape, so collecting them here
  // yields exact zeros; tests lean on that.
  std::vector<Matrix*> params;
  visit_params(online, [&](const std::string&, Matrix& m) { params.push_back(&m); });
  visit_params(target, [&](const std::string&, Matrix& m) { params.push_back(&m); });
  params.push_back(&mapper.lin.w);
  params.push_back(&mapper.lin.b);
  if (auto* fet = dynamic_cast<FrozenEncoderTeacher*>(ctx.teacher)) {
    FeatureExtractor& ex = fet->extractor();
    params.push_back(&ex.embed.w);
    params.push_back(&ex.embed.b);
  }

  XForwardResult res;
  for (size_t i = 0; i < batch.x_noisy.size(); ++i) {
    auto [grid, patches] =
        patchify(batch.x_noisy[i], ctx.core.encoder.patch_f, ctx.core.encoder.patch_t);
    if (grid.n_f != ctx.core.grid.n_f || grid.n_t != ctx.core.grid.n_t)
      throw ConsistencyError("batch item does not match the configured grid");
    const MaskPlan& plan = plans[i];

    Tape t;
    Var visible = t.input(take_rows(patches, plan.visible));
    if (trace) {
      trace->core.online_tokens_per_item.push_back(int(plan.visible.size()));
      trace->core.online_inputs.push_back(t.value(visible));
    }
    Var z_v = encode_patches_graph(t, visible, online.embed, online.encoder,
                                   ctx.core.encoder.heads, ctx.core.pe, plan.visible);
    Var z_hat = predict_graph(t, z_v, online, ctx.core.encoder, plan, ctx.core.pe);
    Var z_hat_m = t.gather_rows(z_hat, plan.masked);

    Var masked = t.input(take_rows(patches, plan.masked));
    if (trace) {
      trace->core.target_tokens_per_item.push_back(int(plan.masked.size()));
      trace->core.target_inputs.push_back(t.value(masked));
    }
    Var z_t_m = encode_patches_graph(t, masked, target.embed, target.encoder,
                                     ctx.core.encoder.heads, ctx.core.pe, plan.masked);
    Var z_tilde_m = t.detach(t.standardize_rows(z_t_m, 1e-6));
    Var item_m2d = t.cosine_mse_rows(z_hat_m, z_tilde_m);

    Var h = assemble_audio_feature_graph(t, z_v, z_hat_m, plan, grid);
    Var item_off{};
    double w_off = 0.0;
    if (supervised) {
      Var logits = linear_graph(t, t.mean_rows(h), mapper.lin);
      item_off = t.bce_with_logits(logits, t.input(batch.y_label.row(long(i))));
      w_off = 1.0 / double(batch.x_noisy.size());
    } else {
      Var mapped = linear_graph(t, h, mapper.lin);
      Matrix tf = ctx.teacher->frames(batch.y_audio[i]);
      if (trace) trace->teacher_inputs.push_back(batch.y_audio[i].data);
      item_off = t.cosine_mse_rows(mapped, t.input(align_teacher_frames(tf, grid.n_t)));
      w_off = double(grid.n_t) / double(total_frames);
    }

    double w_m2d = double(plan.masked.size()) / double(total_masked);
    res.loss_m2d += w_m2d * t.value(item_m2d)(0, 0);
    res.loss_off += w_off * t.value(item_off)(0, 0);

    if (grads) {
      Var item_total = t.add(t.scale(item_m2d, ctx.offline.lambda_m2d * w_m2d),
                             t.scale(item_off, ctx.offline.lambda_off * w_off));
      t.backward(item_total);
      for (Matrix* p : params) grads->add(p, t.param_grad(p));
    }
  }
  res.loss_total = combined_loss(res.loss_m2d, res.loss_off, ctx.offline);
  return res;
}

TrainStepReport train_step_x(XContext& ctx, OnlineState& online, TargetState& target,
                             MapperParams& mapper, const OfflineBatch& batch,
                             const std::vector<MaskPlan>& plans, AdamW& opt,
                             long step, XTrace* trace) {
  GradStore grads;
  XForwardResult res = m2dx_forward(ctx, online, target, mapper, batch, plans, &grads, trace);
  if (!std::isfinite(res.loss_total))
    throw DivergenceError(step, "combined loss " + std::to_string(res.loss_total));
  if (res.loss_m2d > 4.0 + 1e-3)
    throw DivergenceError(step, "masked-prediction loss " + std::to_string(res.loss_m2d));

  opt.step(grads);
  double tau = tau_at(ctx.core.schedule, step);
  ema_update(target, online, tau);

  TrainStepReport report;
  report.loss_m2d = res.loss_m2d;
  report.loss_off = res.loss_off;
  report.loss_total = res.loss_total;
  report.step = step;
  report.tau_used = tau;
  return report;
}

}  // namespace m2d
