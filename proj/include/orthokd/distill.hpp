#pragma once

#include <span>
#include <string>
#include <vector>

#include "orthokd/autograd.hpp"
#include "orthokd/model.hpp"

namespace orthokd {

enum class DistillMode { None, Label, Feature };

std::string to_string(DistillMode mode);
DistillMode distill_mode_from_string(const std::string& s);

/// Hyperparameters of label distillation (alpha, T) and feature
/// distillation (beta). Defaults follow the conventional alpha 0.9, T 4.
struct DistillConfig {
  DistillMode mode = DistillMode::None;
  double alpha = 0.9;
  double temperature = 4.0;
  double beta = 500.0;

  void validate() const;
};

/// Probability vector over classes.
using SoftTarget = std::vector<double>;

SoftTarget softened_softmax(std::span<const double> logits, double temperature);
/// Row-wise softmax(logits / T) of an [N, C] tensor.
Tensor softened_softmax(const Tensor& logits, double temperature);

/// -sum_i y_i log q_i. Terms with y_i = 0 are skipped; q is floored at the
/// smallest normal double so a vanishing probability stays finite.
double cross_entropy(std::span<const double> y, std::span<const double> q);
double entropy(std::span<const double> p);
/// KL(p || q) = -sum p log q + sum p log p.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Single-sample label-distillation loss on raw logits:
/// (1 - alpha) CE(y, softmax(s)) + alpha T^2 KL(softmax(t/T) || softmax(s/T)).
double kd_loss_value(std::span<const double> y, std::span<const double> student_logits,
                     std::span<const double> teacher_logits, const DistillConfig& cfg);

/// Batched label-distillation loss. `targets` are [N, C] rows (one-hot or
/// mixed); the teacher enters as constant logits so no gradient reaches it.
Variable kd_loss(Tape& tape, const Tensor& targets, const Variable& student_logits,
                 const Tensor& teacher_logits, const DistillConfig& cfg);

struct FeatureLossTerms {
  Variable total;
  Variable distill;  // beta-free normalised L1 term (batch mean)
  std::size_t guarded_maps = 0;
};

/// CE(y, softmax(s)) + beta * || phi_T/|phi_T| - R(phi_S)/|R(phi_S)| ||_1,
/// norms per sample over the whole feature map. Gradients reach the student
/// and the regressor only.
FeatureLossTerms fd_loss(Tape& tape, const Tensor& targets, const Variable& student_logits,
                         const Variable& student_feature, const Tensor& teacher_feature,
                         const Regressor& reg, const DistillConfig& cfg);

/// One entry of the fractional-count dataset: (x, one-hot class c_i, count p_i).
struct FractionalSample {
  std::size_t class_index;
  double weight;
};

/// Expands a soft target into one-hot samples with fractional counts;
/// zero-probability classes are omitted.
std::vector<FractionalSample> expand_soft_target(std::span<const double> p);
/// sum_i weight_i * (-log q_{c_i}): equals cross_entropy(p, q) for the expansion of p.
double expanded_cross_entropy(std::span<const FractionalSample> samples,
                              std::span<const double> q);

/// Rescales a reference beta by the ratio of last-feature element counts
/// (H x W x C), keeping CE and feature terms in balance across networks.
double rescale_beta(double reference_beta, std::size_t reference_elements,
                    std::size_t feature_elements);
/// Reference beta per family: resnet 500 at 8x8x64, vgg 1500 at 2x2x512.
double default_beta(const std::string& arch, std::size_t feature_elements);

/// One-hot [N, C] target rows from integer labels.
Tensor one_hot(std::span<const int> labels, std::size_t classes);

}  // namespace orthokd
