#include "orthokd/optim.hpp"

#include <cmath>

#include "orthokd/errors.hpp"

namespace orthokd {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("optimizer: learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be non-negative");
  if (norm_order != 1 && norm_order != 2) throw ConfigError("optimizer: norm_order must be 1 or 2");
  for (std::size_t i = 0; i < decay_schedule.size(); ++i) {
    const auto& [step, mult] = decay_schedule[i];
    if (i > 0 && step <= decay_schedule[i - 1].first) {
      throw ConfigError("optimizer: decay steps must be strictly increasing");
    }
    if (!(mult > 0.0) || mult > 1.0) throw ConfigError("optimizer: decay multiplier must be in (0,1]");
  }
}

double OptimizerConfig::rate_at(std::size_t step) const {
  double lr = learning_rate;
  for (const auto& [s, m] : decay_schedule) {
    if (step >= s) lr *= m;
  }
  return lr;
}

double decay_gradient(double theta, double lambda, int p) {
  if (lambda == 0.0) return 0.0;
  if (p == 1) return lambda * (theta > 0.0 ? 1.0 : (theta < 0.0 ? -1.0 : 0.0));
  return 2.0 * lambda * theta;
}

void sgd_update(Tensor& theta, const Tensor& grad, Tensor& velocity, const OptimizerConfig& config,
                std::size_t step_index) {
  const double lr = config.rate_at(step_index);
  const bool use_momentum = config.momentum > 0.0;
  if (use_momentum && velocity.empty()) velocity = Tensor(theta.shape());
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    double g = grad[i] + decay_gradient(theta[i], config.weight_decay, config.norm_order);
    if (use_momentum) {
      velocity[i] = config.momentum * velocity[i] + g;
      g = velocity[i];
    }
    theta[i] -= lr * g;
  }
}

Sgd::Sgd(OptimizerConfig config) : config_(std::move(config)) { config_.validate(); }

void Sgd::step(std::vector<Variable>& params, const WeightMask* mask) {
  for (auto& p : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    if (!p.grad().all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + p.name() + "' at step " +
                         std::to_string(step_));
    }
  }
  for (auto& p : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    const std::vector<bool>* keep = nullptr;
    if (mask) {
      auto it = mask->find(p.name());
      if (it != mask->end()) {
        if (it->second.size() != p.numel()) {
          throw ShapeError("mask for '" + p.name() + "' has " + std::to_string(it->second.size()) +
                           " entries, parameter has " + std::to_string(p.numel()));
        }
        keep = &it->second;
      }
    }
    Tensor& g = p.mutable_grad();
    Tensor& v = velocity_[p.name()];
    if (keep) {
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (!(*keep)[i]) g[i] = 0.0;
    }
    sgd_update(p.mutable_value(), g, v, config_, step_);
    if (keep) {
      Tensor& theta = p.mutable_value();
      for (std::size_t i = 0; i < theta.numel(); ++i) {
        if ((*keep)[i]) continue;
        theta[i] = 0.0;
        if (!v.empty()) v[i] = 0.0;
      }
    }
  }
  ++step_;
}

}  // namespace orthokd
