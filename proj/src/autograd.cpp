#include "orthokd/autograd.hpp"

#include <stdexcept>

#include "orthokd/errors.hpp"

namespace orthokd {

Variable::Variable(Tensor value, bool requires_grad, std::string name)
    : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->name = std::move(name);
}

const Tensor& Variable::grad() const {
  if (!has_grad()) throw std::logic_error("variable '" + name() + "' has no gradient");
  return node_->grad;
}

Tensor& Variable::mutable_grad() {
  if (node_->grad.empty()) node_->grad = Tensor(node_->value.shape());
  return node_->grad;
}

Variable Variable::clone() const {
  if (!node_) return {};
  Variable out(node_->value, node_->requires_grad, node_->name);
  out.node_->grad = node_->grad;
  return out;
}

void accumulate_grad(detail::Node& node, const Tensor& g) {
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                     shape_str(node.value.shape()));
  }
  if (node.grad.empty()) {
    node.grad = g;
    return;
  }
  double* dst = node.grad.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

void Tape::record(const Variable& output, BackwardFn fn) {
  if (consumed_) throw std::logic_error("cannot record on a consumed tape");
  entries_.push_back({output.node(), std::move(fn)});
}

void Tape::backward(const Variable& loss) {
  if (consumed_) throw std::logic_error("backward called twice on a consumed tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  bool on_tape = false;
  for (const auto& e : entries_) {
    if (e.output == loss.node()) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw std::logic_error("loss was not produced on this tape");

  consumed_ = true;
  loss.node()->grad = Tensor(loss.shape(), 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn(it->output->grad);
  }
  // Release saved activations; intermediate nodes die with their last handle.
  entries_.clear();
}

}  // namespace orthokd
