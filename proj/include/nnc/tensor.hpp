#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nnc/errors.hpp"

namespace nnc {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace autograd {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// RAII scope that disables tape recording (teacher forward, evaluation).
struct NoGradGuard {
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  bool prev;
};

}  // namespace autograd

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
};

// Shared-handle dense tensor. Values are written once by the producing op;
// only the grad buffer mutates afterwards (and buffer tensors, e.g. BN
// running stats, which live outside the tape).
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(t.impl_->shape)), S(0));
    return t;
  }

  static Tensor full(Shape shape, S value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.data()) v = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw DimError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(S value) { return from({1}, {value}); }

  // Tensor is a shared handle: a const handle still exposes the mutable
  // payload, mirroring shared_ptr semantics. Ops rely on this to accumulate
  // grads through by-value lambda captures.
  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::vector<S>& data() const { return impl_->data; }
  S* ptr() const { return impl_->data.data(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  const Tensor& set_requires_grad(bool v) const {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }

  // Grad buffer, zero-allocated on first use. Accumulation is additive.
  std::vector<S>& grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
    return impl_->grad;
  }
  const std::vector<S>& grad_view() const { return impl_->grad; }

  void zero_grad() const {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
  }

  // Deep value copy, detached from any graph.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

// Per-scalar-type execution tape. Ops append backward rules in execution
// order, which is a topological order by construction; backward() replays
// them once in reverse and clears the tape.
template <typename S>
class Tape {
 public:
  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(std::function<void()> backward_rule) { entries_.push_back(std::move(backward_rule)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }
  std::vector<std::function<void()>>& entries() { return entries_; }

 private:
  std::vector<std::function<void()>> entries_;
};

template <typename S>
inline bool tracking(const Tensor<S>& t) {
  return autograd::grad_mode() && t.defined() && t.requires_grad();
}

// Reverse-mode sweep from a scalar loss. Grads accumulate additively into
// every requires_grad tensor reachable from the loss.
template <typename S>
inline void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward expects a defined scalar loss");
  auto& tape = Tape<S>::active();
  loss.grad()[0] += S(1);
  auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) (*it)();
  tape.clear();
}

}  // namespace nnc
