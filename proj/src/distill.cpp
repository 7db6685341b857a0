#include "orthokd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "orthokd/errors.hpp"
#include "orthokd/log.hpp"
#include "orthokd/ops.hpp"

namespace orthokd {

std::string to_string(DistillMode mode) {
  switch (mode) {
    case DistillMode::None:
      return "none";
    case DistillMode::Label:
      return "label";
    case DistillMode::Feature:
      return "feature";
  }
  return "none";
}

DistillMode distill_mode_from_string(const std::string& s) {
  if (s == "none" || s == "scratch") return DistillMode::None;
  if (s == "label") return DistillMode::Label;
  if (s == "feature") return DistillMode::Feature;
  throw ConfigError("distill.mode must be none, label or feature (got '" + s + "')");
}

void DistillConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("distill.alpha must lie in [0,1]");
  if (!(temperature > 0.0)) throw ConfigError("distill.temperature must be positive");
  if (beta < 0.0) throw ConfigError("distill.beta must be non-negative");
}

SoftTarget softened_softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softened_softmax: temperature must be positive");
  SoftTarget p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z / temperature);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - mx);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

Tensor softened_softmax(const Tensor& logits, double temperature) {
  if (logits.rank() != 2) throw ShapeError("softened_softmax: logits must be [N, C]");
  Tensor out(logits.shape());
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = softened_softmax(std::span<const double>(logits.data() + i * c, c), temperature);
    std::copy(row.begin(), row.end(), out.data() + i * c);
  }
  return out;
}

namespace {
void expect_same_length(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": dimension mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}
}  // namespace

double cross_entropy(std::span<const double> y, std::span<const double> q) {
  expect_same_length(y, q, "cross_entropy");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 0.0) continue;
    s -= y[i] * std::log(std::max(q[i], std::numeric_limits<double>::min()));
  }
  return s;
}

double entropy(std::span<const double> p) {
  double s = 0.0;
  for (double v : p)
    if (v > 0.0) s -= v * std::log(v);
  return s;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  expect_same_length(p, q, "kl_divergence");
  return cross_entropy(p, q) - entropy(p);
}

double kd_loss_value(std::span<const double> y, std::span<const double> student_logits,
                     std::span<const double> teacher_logits, const DistillConfig& cfg) {
  cfg.validate();
  expect_same_length(student_logits, teacher_logits, "kd_loss");
  const auto q = softened_softmax(student_logits, 1.0);
  const auto ps = softened_softmax(student_logits, cfg.temperature);
  const auto pt = softened_softmax(teacher_logits, cfg.temperature);
  const double t2 = cfg.temperature * cfg.temperature;
  return (1.0 - cfg.alpha) * cross_entropy(y, q) + cfg.alpha * t2 * kl_divergence(pt, ps);
}

Variable kd_loss(Tape& tape, const Tensor& targets, const Variable& student_logits,
                 const Tensor& teacher_logits, const DistillConfig& cfg) {
  cfg.validate();
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("kd_loss: student logits " + shape_str(student_logits.shape()) +
                     " and teacher logits " + shape_str(teacher_logits.shape()) + " differ");
  }
  Variable ce = softmax_cross_entropy(tape, student_logits, targets, 1.0);
  Variable kl = kl_div_with_logits(tape, student_logits,
                                   softened_softmax(teacher_logits, cfg.temperature),
                                   cfg.temperature);
  const double t2 = cfg.temperature * cfg.temperature;
  return add(tape, scale(tape, ce, 1.0 - cfg.alpha), scale(tape, kl, cfg.alpha * t2));
}

FeatureLossTerms fd_loss(Tape& tape, const Tensor& targets, const Variable& student_logits,
                         const Variable& student_feature, const Tensor& teacher_feature,
                         const Regressor& reg, const DistillConfig& cfg) {
  cfg.validate();
  if (reg.out_channels() != teacher_feature.dim(1)) {
    throw ShapeError("fd_loss: regressor emits " + std::to_string(reg.out_channels()) +
                     " channels, teacher feature has " + std::to_string(teacher_feature.dim(1)));
  }
  FeatureLossTerms out;
  Variable mapped = regressor_forward(tape, reg, student_feature);
  // The teacher map is wrapped as a fresh constant: no path back to the teacher.
  out.distill = normalized_l1_distance(tape, Variable(teacher_feature), mapped, 1e-12,
                                       &out.guarded_maps);
  if (out.guarded_maps > 0) {
    log_warning("fd_loss: " + std::to_string(out.guarded_maps) +
                " zero-norm feature map(s) guarded by eps");
  }
  Variable ce = softmax_cross_entropy(tape, student_logits, targets, 1.0);
  out.total = add(tape, ce, scale(tape, out.distill, cfg.beta));
  return out;
}

std::vector<FractionalSample> expand_soft_target(std::span<const double> p) {
  std::vector<FractionalSample> out;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) out.push_back({i, p[i]});
  return out;
}

double expanded_cross_entropy(std::span<const FractionalSample> samples,
                              std::span<const double> q) {
  double s = 0.0;
  for (const auto& smp : samples) {
    if (smp.class_index >= q.size()) throw ShapeError("expanded_cross_entropy: class out of range");
    s += smp.weight * -std::log(std::max(q[smp.class_index], std::numeric_limits<double>::min()));
  }
  return s;
}

double rescale_beta(double reference_beta, std::size_t reference_elements,
                    std::size_t feature_elements) {
  if (reference_elements == 0) throw ConfigError("rescale_beta: reference size must be positive");
  return reference_beta * static_cast<double>(feature_elements) /
         static_cast<double>(reference_elements);
}

double default_beta(const std::string& arch, std::size_t feature_elements) {
  if (arch == "resnet") return rescale_beta(500.0, 8 * 8 * 64, feature_elements);
  if (arch == "vgg") return rescale_beta(1500.0, 2 * 2 * 512, feature_elements);
  throw ConfigError("default_beta: no reference for architecture '" + arch + "'");
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ConfigError("label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
    t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return t;
}

}  // namespace orthokd
