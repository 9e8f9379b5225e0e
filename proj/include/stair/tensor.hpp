#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "stair/types.hpp"

namespace stair {

// Reverse-mode autodiff over dense matrices.
//
// A Var is a handle to a value matrix plus (lazily allocated) gradient
// storage. Ops in ops.hpp compute values eagerly and, when a Tape is active
// and some input requires grad, record a backward closure on the tape.
// Tape::backward replays the closures in reverse recording order, so each
// node is visited exactly once and inputs are always visited after the
// nodes that consumed them.

template <typename S>
class Tape;

template <typename S>
class Var {
 public:
  Var() : d_(std::make_shared<Data>()) {}

  explicit Var(Mat<S> value, bool requires_grad = false) : d_(std::make_shared<Data>()) {
    d_->value = std::move(value);
    d_->requires_grad = requires_grad;
  }

  static Var leaf(Mat<S> value) { return Var(std::move(value), true); }
  static Var constant(Mat<S> value) { return Var(std::move(value), false); }

  const Mat<S>& value() const { return d_->value; }

  // Mutable access to the value, for optimizers and finite-difference
  // probes that nudge leaf parameters between tapes. Never call on a value
  // that a live tape has already consumed.
  Mat<S>& mutable_value() { return d_->value; }

  bool requires_grad() const { return d_->requires_grad; }

  Index rows() const { return d_->value.rows(); }
  Index cols() const { return d_->value.cols(); }

  bool defined() const { return d_->value.size() > 0; }

  // Gradient accumulated by the last backward sweep; zeros if untouched.
  Mat<S> grad() const {
    if (d_->grad_live) return d_->grad;
    return Mat<S>::Zero(rows(), cols());
  }

  bool has_grad() const { return d_->grad_live; }

  // Gradient accumulation mutates the shared payload, not the handle, so
  // these are const: backward closures hold const copies of their inputs.
  void accumulate_grad(const Mat<S>& g) const {
    if (!d_->grad_live) {
      d_->grad = g;
      d_->grad_live = true;
    } else {
      d_->grad += g;
    }
  }

  // Adds into a sub-block of the gradient, zero-filling the rest on first
  // touch. Lets row/column slices backpropagate without materializing a
  // full-size sparse update each.
  void accumulate_grad_block(Index r0, Index c0, const Mat<S>& g) const {
    if (!d_->grad_live) {
      d_->grad = Mat<S>::Zero(rows(), cols());
      d_->grad_live = true;
    }
    d_->grad.block(r0, c0, g.rows(), g.cols()) += g;
  }

  void zero_grad() const {
    d_->grad_live = false;
    d_->grad.resize(0, 0);
  }

  // Value-sharing copy that does not participate in differentiation.
  Var detach() const {
    Var out;
    out.d_->value = d_->value;
    out.d_->requires_grad = false;
    return out;
  }

  bool same_storage(const Var& other) const { return d_ == other.d_; }

 private:
  struct Data {
    Mat<S> value;
    Mat<S> grad;
    bool requires_grad = false;
    bool grad_live = false;
  };

  std::shared_ptr<Data> d_;
};

template <typename S>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

  size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and sweeps the recorded nodes once, newest
  // first. The root must be a 1x1 scalar (a loss).
  void backward(const Var<S>& root) {
    if (root.rows() != 1 || root.cols() != 1)
      throw ShapeError("backward root must be scalar, got " + shape_str(root.value()));
    root.accumulate_grad(Mat<S>::Ones(1, 1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_;
  static thread_local Tape* active_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::active_ = nullptr;

// True when the op being built should record a backward rule.
template <typename S>
bool recording(const Var<S>& a) {
  return Tape<S>::active() != nullptr && a.requires_grad();
}

template <typename S>
bool recording(const Var<S>& a, const Var<S>& b) {
  return Tape<S>::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace stair
