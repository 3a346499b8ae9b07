#pragma once

#include <memory>
#include <vector>

#include "m2d/m2d_core.hpp"
#include "m2d/transfer.hpp"

namespace m2d {

enum class Scenario { supervised, distill, regularize };

struct OfflineConfig {
  Scenario scenario = Scenario::supervised;
  double lambda_m2d = 1.0;
  double lambda_off = 1.0;
  double eta = 0.0;   // background blend ratio applied during batch prep
  int n_classes = 0;  // supervised only
  void validate(bool has_teacher) const;
};

// Frozen per-frame feature source for the distillation and regularization
// scenarios. Implementations must not mutate their parameters.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual Matrix frames(const Spectrogram& clean) = 0;  // frames x feature_dim
  virtual long feature_dim() const = 0;
};

// Frozen encoder whose output is the per-time-frame rearrangement of its
// patch tokens, mirroring the student's feature layout. `layer` reads the
// feature after that many blocks; -1 keeps the full stack.
class FrozenEncoderTeacher : public Teacher {
 public:
  FrozenEncoderTeacher(FeatureExtractor ex, int chunk_frames, int layer = -1);
  Matrix frames(const Spectrogram& clean) override;
  long feature_dim() const override;
  FeatureExtractor& extractor() { return ex_; }

 private:
  FeatureExtractor ex_;
  int chunk_frames_;
};

struct OfflineBatch {
  std::vector<Spectrogram> x_noisy;  // standardized; drives masked prediction
  std::vector<Spectrogram> y_audio;  // clean teacher inputs
  Matrix y_label;                    // B x n_classes multi-hot
  void validate(Scenario scenario) const;
};

// Single linear layer; supervised pools over time first, the distillation
// path maps every frame.
struct MapperParams {
  LinearParams lin;
};
MapperParams init_mapper(int in_dim, int out_dim, Rng& rng);

// Scatters encoded visible tokens and predicted masked tokens back into patch
// order and rearranges them into per-time-frame rows.
Matrix assemble_audio_feature(const TokenSequence& z_v, const TokenSequence& z_hat_m,
                              const MaskPlan& plan, const PatchGrid& grid);

// Graph builders for the combined step.
Var assemble_audio_feature_graph(Tape& t, Var z_v, Var z_hat_m, const MaskPlan& plan,
                                 const PatchGrid& grid);
Var reshape_timeframe_graph(Tape& t, Var z, const PatchGrid& grid);

// Mean BCE between sigmoid(pool-then-map logits) and multi-hot labels.
double offline_supervised_loss(const std::vector<Matrix>& h_hat, const Matrix& y_label,
                               MapperParams& mapper);
// Per-frame cosine loss between mapped student frames and teacher frames;
// frame counts must already agree (align with align_teacher_frames first).
double offline_distill_loss(const std::vector<Matrix>& h_hat,
                            const std::vector<Matrix>& teacher_frames,
                            MapperParams& mapper);
// Linear time interpolation of teacher frames onto the student frame count.
Matrix align_teacher_frames(const Matrix& teacher, long student_frames);

double combined_loss(double l_m2d, double l_off, const OfflineConfig& cfg);

// Further pre-training wiring: the online network starts from the original
// weights and the identical weights serve as the frozen teacher.
struct RegularizeSetup {
  OnlineState online_init;
  std::unique_ptr<FrozenEncoderTeacher> teacher;
};
RegularizeSetup regularize_setup(const OnlineState& original, const EncoderConfig& cfg,
                                 const PatchGrid& grid, int chunk_frames);

struct XTrace {
  StepTrace core;
  std::vector<Matrix> teacher_inputs;  // copies of the clean data each item fed
};

struct XContext {
  TrainContext core;
  OfflineConfig offline;
  Teacher* teacher = nullptr;  // borrowed; required for distill/regularize
};

// Forward pass computing both losses jointly; gradients flow to the online
// parameters and the mapper, never to the teacher or target.
struct XForwardResult {
  double loss_m2d = 0.0;
  double loss_off = 0.0;
  double loss_total = 0.0;
};
XForwardResult m2dx_forward(XContext& ctx, OnlineState& online, TargetState& target,
                            MapperParams& mapper, const OfflineBatch& batch,
                            const std::vector<MaskPlan>& plans, GradStore* grads,
                            XTrace* trace = nullptr);

TrainStepReport train_step_x(XContext& ctx, OnlineState& online, TargetState& target,
                             MapperParams& mapper, const OfflineBatch& batch,
                             const std::vector<MaskPlan>& plans, AdamW& opt,
                             long step, XTrace* trace = nullptr);

}  // namespace m2d
