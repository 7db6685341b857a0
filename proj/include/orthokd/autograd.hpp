#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "orthokd/tensor.hpp"

namespace orthokd {

namespace detail {
struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string name;
};
}  // namespace detail

/// Shared handle to a tensor that may participate in a recorded computation.
/// Copies alias the same node; use clone() for an independent copy.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false, std::string name = {});

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const;
  Tensor& mutable_grad();  // zero-initialised on first use
  void zero_grad() { node_->grad = Tensor(); }

  const std::string& name() const { return node_->name; }
  void set_name(std::string name) { node_->name = std::move(name); }

  Variable clone() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Adds `g` into the gradient of `node` when the node requires one.
void accumulate_grad(detail::Node& node, const Tensor& g);

/// Ordered record of primitive applications. Entries are appended in
/// execution order, so reverse order is a reverse topological order.
/// A tape supports exactly one backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void record(const Variable& output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and propagates. Throws on a consumed tape,
  // a non-scalar loss, or a loss not produced on this tape.
  void backward(const Variable& loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

  // A non-recording tape makes every op produce constants (inference mode).
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  struct Entry {
    std::shared_ptr<detail::Node> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  bool recording_ = true;
};

}  // namespace orthokd
