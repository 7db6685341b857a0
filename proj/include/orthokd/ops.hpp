#pragma once

#include "orthokd/autograd.hpp"

namespace orthokd {

// Differentiable primitives. Every op records itself on `tape` only when at
// least one input requires a gradient, so frozen networks (teachers) run
// without growing the tape.

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

/// input NCHW, weight OIKK (square kernel), optional bias [O].
Variable conv2d(Tape& tape, const Variable& input, const Variable& weight, const Variable& bias,
                Conv2dParams params);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0);
};

/// Training mode normalises by batch statistics (biased variance) and updates
/// `state` when non-null; eval mode uses the running statistics.
Variable batchnorm2d(Tape& tape, const Variable& input, const Variable& gamma,
                     const Variable& shift, BatchNormState* state, bool training);

Variable relu(Tape& tape, const Variable& x);
Variable add(Tape& tape, const Variable& a, const Variable& b);
Variable mul(Tape& tape, const Variable& a, const Variable& b);
Variable scale(Tape& tape, const Variable& x, double c);
Variable sum(Tape& tape, const Variable& x);
Variable abs_sum(Tape& tape, const Variable& x);  // sign subgradient, 0 at 0

/// Parameter-free residual shortcut: spatial subsampling by `stride` and
/// symmetric zero padding of channels up to `out_channels`.
Variable shortcut(Tape& tape, const Variable& x, std::size_t stride, std::size_t out_channels);

Variable max_pool2x2(Tape& tape, const Variable& x);
Variable global_avg_pool(Tape& tape, const Variable& x);  // NCHW -> NC

/// x [N,F], weight [O,F], optional bias [O] -> [N,O].
Variable linear(Tape& tape, const Variable& x, const Variable& weight, const Variable& bias);

/// Batch mean of -sum_i t_i log softmax(logits / T)_i for target rows t.
Variable softmax_cross_entropy(Tape& tape, const Variable& logits, const Tensor& targets,
                               double temperature = 1.0);

/// Batch mean of KL(p || softmax(logits / T)) with p the target rows.
Variable kl_div_with_logits(Tape& tape, const Variable& logits, const Tensor& target_probs,
                            double temperature);

/// Batch mean of || a_n/||a_n|| - b_n/||b_n|| ||_1, with norms over each
/// sample's whole feature map and floored at `eps`. `zero_norms` receives
/// the count of guarded maps when non-null.
Variable normalized_l1_distance(Tape& tape, const Variable& a, const Variable& b,
                                double eps = 1e-12, std::size_t* zero_norms = nullptr);

}  // namespace orthokd
