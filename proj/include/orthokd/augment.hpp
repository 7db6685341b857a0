#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "orthokd/autograd.hpp"
#include "orthokd/model.hpp"

namespace orthokd {

using Rng = std::mt19937_64;

enum class AugmentKind { None, CutMix, Policy };

std::string to_string(AugmentKind kind);
AugmentKind augment_kind_from_string(const std::string& s);

// ---------------------------------------------------------------- CutMix

/// Contained keeps the whole sampled box inside the image (top-left drawn
/// uniformly over valid positions), so E[lambda_adj] = E[lambda]. Clamped
/// draws the centre uniformly over the image and clips the box to the
/// borders; clipping shrinks boxes and biases lambda_adj upward.
enum class BoxPlacement { Contained, Clamped };

struct CutBox {
  std::size_t x = 0, y = 0, w = 0, h = 0;  // column, row, width, height in pixels
  std::size_t area() const { return w * h; }
};

struct CutMixBatch {
  Tensor inputs;                  // mixed images, NCHW
  std::vector<int> labels_a;      // labels of the original images
  std::vector<int> labels_b;      // labels of the partners
  std::vector<std::size_t> partner;
  double lambda = 1.0;            // adjusted weight of labels_a
  CutBox box;
};

/// Box of nominal size W*sqrt(1-lambda) x H*sqrt(1-lambda) (rounded).
CutBox sample_box(std::size_t height, std::size_t width, double lambda, Rng& rng,
                  BoxPlacement placement = BoxPlacement::Contained);
/// 1 - area / (H*W).
double adjusted_lambda(const CutBox& box, std::size_t height, std::size_t width);

/// Pastes `box` of x[partner[n]] into x[n] for every sample.
CutMixBatch cutmix_with(const Tensor& batch, const std::vector<int>& labels, const CutBox& box,
                        std::vector<std::size_t> partner);
/// lambda ~ Beta(a, a) (a = 1 is uniform), partners = a uniform permutation.
CutMixBatch sample_cutmix(const Tensor& batch, const std::vector<int>& labels, Rng& rng,
                          BoxPlacement placement = BoxPlacement::Contained,
                          double beta_a = 1.0);

/// lambda * onehot(y_a) + (1 - lambda) * onehot(y_b), [N, C].
Tensor mixed_targets(const CutMixBatch& cmb, std::size_t classes);

/// A loss that is linear in its [N, C] target rows.
using TargetLoss = std::function<Variable(Tape&, const Variable& logits, const Tensor& targets)>;

/// lambda * loss(y_a) + (1 - lambda) * loss(y_b).
Variable cutmix_loss(Tape& tape, const Variable& logits, const CutMixBatch& cmb,
                     std::size_t classes, const TargetLoss& loss);

// ------------------------------------------------------- random policy

enum class PolicyOp { Rotate, Translate, Shear, Flip, Brightness, Contrast, Erase };

std::string to_string(PolicyOp op);
PolicyOp policy_op_from_string(const std::string& s);

struct OpRange {
  PolicyOp op;
  double lo;
  double hi;
};

struct AugmentPolicy {
  std::vector<OpRange> ops;
  std::size_t ops_per_sample = 2;
  double fill = 0.5;  // value for pixels uncovered by geometric ops and erasing

  /// rotate +-15 deg, translate +-3 px, shear +-0.1, flip, brightness and
  /// contrast +-0.2, erase up to 25% of the area.
  static AugmentPolicy standard();
  void validate() const;
};

/// Text form: one "op lo hi" line per op; '#' starts a comment; an optional
/// "ops_per_sample N" or "fill v" line overrides the defaults.
AugmentPolicy parse_policy(const std::string& text);
AugmentPolicy load_policy_file(const std::string& path);

/// One op on a [C, H, W] image with pixel values in [0, 1]. `m` is the
/// magnitude (angle in degrees, pixels, shear factor, flip iff m >= 0.5,
/// additive brightness, contrast factor, erased area fraction). `m2` is the
/// second translation axis; erase placement draws from `rng`.
Tensor apply_op(const Tensor& image, PolicyOp op, double m, double m2, Rng& rng,
                double fill = 0.5);

/// Draws `ops_per_sample` ops uniformly (with replacement) and a uniform
/// magnitude for each; the result is clamped to [0, 1].
Tensor apply_policy(const Tensor& image, const AugmentPolicy& policy, Rng& rng);
/// apply_policy on every image of an NCHW batch.
Tensor apply_policy_batch(const Tensor& batch, const AugmentPolicy& policy, Rng& rng);

// --------------------------------------------------------------- regimes

/// Whether the teacher checkpoint and the student's own training use augmentation.
struct AugmentRegime {
  bool teacher_aug = false;
  bool student_aug = false;

  static AugmentRegime parse(const std::string& code);  // nn | ny | yn | yy
  std::string code() const;
  friend bool operator==(const AugmentRegime&, const AugmentRegime&) = default;
};

struct TeacherSet {
  const ModelGraph* vanilla = nullptr;
  const ModelGraph* augmented = nullptr;
};

/// Teacher checkpoint selected by the regime; ConfigError when unavailable.
const ModelGraph& select_teacher(const TeacherSet& teachers, AugmentRegime regime);

struct RegimeStep {
  Tensor pixels;          // the exact tensor fed to both networks (after `prepare`)
  Tensor teacher_logits;  // eval mode, no gradient
  Tensor teacher_feature;
  ForwardOutput student;  // training-mode forward recorded on the tape
};

using ImageFn = std::function<Tensor(const Tensor&)>;

/// The student decides which pixels both networks see: augmented when
/// `regime.student_aug`, vanilla otherwise. `augment` is applied once, so a
/// yes/yes step shares a single draw between teacher and student. `prepare`
/// (e.g. normalisation) maps the chosen pixels to the network input.
RegimeStep regime_forward(const TeacherSet& teachers, ModelGraph& student, Tape& tape,
                          const Tensor& batch, AugmentRegime regime, const ImageFn& augment,
                          const ImageFn& prepare = {});

}  // namespace orthokd
