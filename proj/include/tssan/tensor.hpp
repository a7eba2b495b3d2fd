#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tssan/error.hpp"

namespace tssan {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor of 64-bit reals.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape route gradients back to parameters. Use clone() for a deep
/// copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    validate_shape(shape);
    impl_->value.assign(tssan::numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    validate_shape(shape);
    if (tssan::numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + tssan::to_string(shape) +
                           " does not match " + std::to_string(values.size()) +
                           " values");
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw IndexError("tensor: axis " + std::to_string(axis) +
                       " out of range for shape " + tssan::to_string(shape()));
    }
    return impl().shape[axis];
  }
  std::size_t numel() const { return impl().value.size(); }

  std::span<const double> values() const { return impl().value; }
  std::span<double> values() { return impl().value; }
  const double* data() const { return impl().value.data(); }
  double* data() { return impl().value.data(); }

  double item() const {
    if (numel() != 1) {
      throw ContractError("tensor: item() on non-scalar " +
                          tssan::to_string(shape()));
    }
    return impl().value[0];
  }

  double& operator[](std::size_t i) { return impl().value[i]; }
  double operator[](std::size_t i) const { return impl().value[i]; }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on) { impl().requires_grad = on; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }

  /// Gradient buffer, allocated as zeros on first use. Const because the
  /// buffer belongs to the shared storage, not to this handle.
  std::span<double> grad_buffer() const {
    auto& g = impl().grad;
    if (g.empty()) g.assign(impl().value.size(), 0.0);
    return g;
  }

  void zero_grad() { impl().grad.assign(impl().value.size(), 0.0); }
  void drop_grad() { impl().grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), impl().value, false);
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor: empty shape");
    for (auto e : shape) {
      if (e == 0) {
        throw DimensionError("tensor: zero extent in " + tssan::to_string(shape));
      }
    }
  }

  detail::TensorImpl& impl() const {
    if (!impl_) throw ContractError("tensor: use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations executed while the tape is
/// active on the current thread.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor& output, BackwardFn fn) {
    entries_.push_back(Entry{output, std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  static Tape* active() { return active_slot(); }

  /// Makes `tape` the recording target for this thread until destruction.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_slot()) { active_slot() = &tape; }
    ~Scope() { active_slot() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  friend void backward(const Tensor& loss, Tape& tape);

  struct Entry {
    Tensor output;
    BackwardFn backward;
  };

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<Entry> entries_;
};

/// Reverse pass from a scalar loss. Every requires_grad tensor reachable from
/// `loss` through the tape receives its gradient, summed over uses.
inline void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " +
                        to_string(loss.shape()));
  }
  auto it = std::find_if(tape.entries_.rbegin(), tape.entries_.rend(),
                         [&](const Tape::Entry& e) { return e.output.same_storage(loss); });
  if (it == tape.entries_.rend()) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  loss.grad_buffer()[0] += 1.0;
  for (; it != tape.entries_.rend(); ++it) {
    Tensor out = it->output;
    if (!out.has_grad()) continue;
    it->backward(out.grad());
  }
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Marks `out` as differentiable and records its backward rule when a tape is
/// active and some input needs a gradient.
inline void record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                   Tape::BackwardFn fn) {
  if (!any_requires_grad(inputs)) return;
  Tape* tape = Tape::active();
  if (!tape) return;
  out.set_requires_grad(true);
  tape->record(out, std::move(fn));
}

/// Gradient sink for `t`, or an empty span when `t` takes no gradient.
inline std::span<double> grad_sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.grad_buffer();
}

}  // namespace detail

}  // namespace tssan
