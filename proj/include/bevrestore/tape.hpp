#pragma once

// Eager reverse-mode differentiation. Every differentiable op evaluates its
// forward immediately and, when any input needs a gradient, appends a node
// holding the backward closure. backward() walks nodes in exact reverse
// recording order; gradients accumulate additively at fan-out.
//
// The tape also keeps a running count of live tensor bytes (recorded values,
// saved auxiliaries and intermediate gradient buffers) and its high-water
// mark. Parameter values and parameter gradients are model state and are not
// counted.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "bevrestore/errors.hpp"
#include "bevrestore/tensor.hpp"

namespace bevrestore {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Called with the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Input data; never receives a gradient.
  Var constant(Tensor t) {
    Node n;
    n.owned = std::move(t);
    add_live(n.owned.bytes());
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Leaf referencing a parameter. Its gradient accumulates straight into
  // Parameter::grad when the parameter is trainable.
  Var param(Parameter& p) {
    Node n;
    n.param = &p;
    n.needs_grad = p.trainable;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Differentiable input that is not a Parameter (finite-difference checks,
  // gradients w.r.t. data). Its gradient is read back with grad().
  Var variable(Tensor t) {
    Node n;
    n.owned = std::move(t);
    n.needs_grad = true;
    n.keep_grad = true;
    add_live(n.owned.bytes());
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Appends an op result. `inputs` decide whether a backward closure is kept;
  // aux_bytes accounts for tensors the closure saved besides the inputs.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn,
             std::size_t aux_bytes = 0) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn), aux_bytes);
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn,
             std::size_t aux_bytes = 0) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by a tape op");
    Node n;
    n.owned = std::move(value);
    for (const Var& v : inputs) {
      check_owned(v);
      if (nodes_[static_cast<std::size_t>(v.id())].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) {
      n.backward = std::move(fn);
      n.aux_bytes = aux_bytes;
    }
    add_live(n.owned.bytes() + n.aux_bytes);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Tensor& value(const Var& v) const {
    check_owned(v);
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    return n.param ? n.param->value : n.owned;
  }

  bool needs_grad(const Var& v) const {
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id())].needs_grad;
  }

  // Gradient buffer of v for accumulation inside backward closures, or
  // nullptr when v does not take a gradient.
  Tensor* grad_buffer(const Var& v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (!n.needs_grad) return nullptr;
    if (n.param) return &n.param->grad;
    if (!n.has_grad) {
      n.grad = Tensor(n.owned.shape());
      n.has_grad = true;
      add_live(n.grad.bytes());
    }
    return &n.grad;
  }

  // Gradient of a variable() leaf after backward().
  const Tensor& grad(const Var& v) const {
    check_owned(v);
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.param) return n.param->grad;
    if (!n.keep_grad) throw UsageError("gradient requested for a non-leaf node");
    if (!n.has_grad) throw UsageError("no gradient reached this variable");
    return n.grad;
  }

  void backward(const Var& loss) {
    if (loss.tape() != this || loss.id() < 0 || loss.id() >= static_cast<int>(nodes_.size())) {
      throw UsageError("loss is not recorded on this tape");
    }
    if (value(loss).size() != 1) throw UsageError("backward requires a scalar loss");
    Node& root = nodes_[static_cast<std::size_t>(loss.id())];
    if (!root.needs_grad) return;
    Tensor* seed = grad_buffer(loss);
    (*seed)[0] += 1.0;
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.backward) continue;
      if (!n.grad.all_finite()) throw NumericError("non-finite gradient during backward");
      n.backward(*this, n.grad);
      if (!n.keep_grad) {
        sub_live(n.grad.bytes());
        n.grad = Tensor();
        n.has_grad = false;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t live_bytes() const { return live_bytes_; }
  std::size_t peak_bytes() const { return peak_bytes_; }

 private:
  struct Node {
    Tensor owned;
    Parameter* param = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    bool keep_grad = false;
    BackwardFn backward;
    std::size_t aux_bytes = 0;
  };

  void check_owned(const Var& v) const {
    if (v.tape() != this || v.id() < 0 || v.id() >= static_cast<int>(nodes_.size())) {
      throw UsageError("variable does not belong to this tape");
    }
  }
  void add_live(std::size_t b) {
    live_bytes_ += b;
    peak_bytes_ = std::max(peak_bytes_, live_bytes_);
  }
  void sub_live(std::size_t b) { live_bytes_ -= std::min(b, live_bytes_); }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
  std::size_t live_bytes_ = 0;
  std::size_t peak_bytes_ = 0;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw UsageError("unbound variable");
  return tape_->value(*this);
}

inline bool Var::needs_grad() const {
  if (!tape_) throw UsageError("unbound variable");
  return tape_->needs_grad(*this);
}

}  // namespace bevrestore
