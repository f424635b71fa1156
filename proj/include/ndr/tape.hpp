#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "ndr/tensor.hpp"

namespace ndr {

template <class T>
class TapeScope;
template <class T>
class NoGradScope;

/// Records backward closures in creation (topological) order. A tape is
/// confined to the thread that activated it through a TapeScope.
template <class T>
class Tape {
 public:
  using Backward = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Backward fn) {
    if (consumed_) throw std::logic_error("tape: recording after backward; call reset() first");
    records_.push_back(std::move(fn));
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure once in
  /// reverse order. A second call without reset() is an error.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw std::logic_error("tape: backward called twice without reset");
    if (loss.numel() != 1) shape_fail("backward", loss.shape(), "loss must be a scalar");
    if (!loss.requires_grad()) throw std::logic_error("tape: loss does not depend on any tracked tensor");
    loss.grad_mut()[0] += T{1};
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
    consumed_ = true;
  }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active() { return current(); }

 private:
  template <class>
  friend class TapeScope;
  template <class>
  friend class NoGradScope;

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<Backward> records_;
  bool consumed_ = false;
};

/// Makes `tape` the active recorder on this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current()) { Tape<T>::current() = &tape; }
  ~TapeScope() { Tape<T>::current() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (evaluation passes inside a training scope).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::current()) { Tape<T>::current() = nullptr; }
  ~NoGradScope() { Tape<T>::current() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <class T, class... Rest>
Tape<T>* recording(const Tensor<T>& first, const Rest&... rest) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  if (first.requires_grad() || (rest.requires_grad() || ...)) return tape;
  return nullptr;
}

}  // namespace detail

}  // namespace ndr
