#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "orthokd/augment.hpp"
#include "orthokd/data.hpp"
#include "orthokd/distill.hpp"
#include "orthokd/model.hpp"
#include "orthokd/optim.hpp"

namespace orthokd {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t steps = 0;  // when non-zero, overrides epochs with an exact step count
  std::size_t batch_size = 128;
  OptimizerConfig optim;
  // Learning-rate decay points as fractions of the total step count; each
  // multiplies the rate by `decay_factor`.
  std::vector<double> decay_at{0.5, 0.75};
  double decay_factor = 0.1;
  DistillConfig distill;
  double lambda_s = 0.0;  // slimming penalty on BN scales
  AugmentKind augment = AugmentKind::None;
  AugmentRegime regime;   // student_aug selects augmented pixels; teacher_aug the teacher
  AugmentPolicy policy = AugmentPolicy::standard();
  BoxPlacement placement = BoxPlacement::Contained;
  std::uint64_t seed = 0;

  std::size_t total_steps(std::size_t train_size) const;
  /// optim with decay_schedule filled in for `total` steps.
  OptimizerConfig optimizer_for(std::size_t total) const;
};

struct TrainResult {
  ModelGraph model;
  std::optional<Regressor> regressor;  // feature distillation only
  std::vector<double> epoch_loss;      // mean training loss per epoch (or per pass)
  std::size_t steps = 0;
  std::size_t mask_audits = 0;
};

/// Trains `model` on the training split. With distillation enabled the
/// teacher comes from `teachers` according to `cfg.regime`. `mask`, when
/// given, is enforced at every step and audited after every update; a
/// violated mask throws std::logic_error. A non-finite loss throws NumericError.
TrainResult train_model(ModelGraph model, const DatasetHandle& data, const TrainConfig& cfg,
                        const TeacherSet* teachers = nullptr, const WeightMask* mask = nullptr);

/// Fine-tuning of a pruned model under its mask for `steps` updates.
TrainResult masked_finetune(ModelGraph model, const WeightMask& mask, std::size_t steps,
                            const DatasetHandle& data, TrainConfig cfg,
                            const TeacherSet* teachers = nullptr);

/// Top-1 accuracy in percent on the test split (eval mode).
double evaluate_accuracy(const ModelGraph& model, const DatasetHandle& data,
                         std::size_t batch_size = 256);
/// Top-1 accuracy of precomputed logits.
double accuracy_of(const Tensor& logits, const std::vector<int>& labels);

}  // namespace orthokd
