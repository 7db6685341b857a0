#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "orthokd/autograd.hpp"

namespace orthokd {

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // lambda in J = L + lambda * ||theta||_p^p
  int norm_order = 2;          // p, 1 or 2
  // (step, multiplier): from `step` on, the rate is further scaled by `multiplier`.
  std::vector<std::pair<std::size_t, double>> decay_schedule;

  void validate() const;
  double rate_at(std::size_t step) const;
};

/// Per-parameter boolean keep masks; a missing entry means "keep everything".
using WeightMask = std::map<std::string, std::vector<bool>>;

/// Gradient of lambda * ||theta||_p^p for one coordinate (sign subgradient at 0 for p = 1).
double decay_gradient(double theta, double lambda, int p);

/// Classical heavy-ball SGD. The decay gradient is added to the raw gradient
/// before it enters the momentum buffer.
class Sgd {
 public:
  explicit Sgd(OptimizerConfig config);

  // One update of every parameter that has a gradient. Masked coordinates
  // get their gradient, momentum and value forced to zero. Throws
  // NumericError naming the first parameter with a non-finite gradient.
  void step(std::vector<Variable>& params, const WeightMask* mask = nullptr);

  std::size_t step_index() const { return step_; }
  void set_step_index(std::size_t s) { step_ = s; }
  const OptimizerConfig& config() const { return config_; }

  std::map<std::string, Tensor>& momentum_buffers() { return velocity_; }
  const std::map<std::string, Tensor>& momentum_buffers() const { return velocity_; }

 private:
  OptimizerConfig config_;
  std::size_t step_ = 0;
  std::map<std::string, Tensor> velocity_;
};

/// Stateless single update (`velocity` may be empty when momentum is zero).
void sgd_update(Tensor& theta, const Tensor& grad, Tensor& velocity, const OptimizerConfig& config,
                std::size_t step_index);

}  // namespace orthokd
