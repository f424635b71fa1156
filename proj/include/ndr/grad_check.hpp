#pragma once

#include <cmath>
#include <vector>
#include <stdexcept>
#include <string>

#include "ndr/optim.hpp"
#include "ndr/tape.hpp"

namespace ndr {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]" of the worst coordinate
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares tape gradients of the scalar `f()` against central differences
/// for every coordinate of every input. `f` must rebuild its graph from the
/// inputs' current values on each call. Use T = double or long double.
template <class T, class F>
GradCheckResult grad_check(F&& f, const std::vector<Parameter<T>>& inputs, double step = 1e-6) {
  for (const auto& p : inputs) {
    auto t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    const Tensor<T> y = f();
    if (!std::isfinite(y.item())) throw std::domain_error("grad_check: non-finite function value");
    tape.backward(y);
  }
  GradCheckResult result;
  for (const auto& p : inputs) {
    auto t = p.tensor;
    std::vector<T> analytic(t.numel(), T{0});
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const T saved = t[i];
      t[i] = saved + static_cast<T>(step);
      const T up = Tensor<T>(f()).item();
      t[i] = saved - static_cast<T>(step);
      const T down = Tensor<T>(f()).item();
      t[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i]))
        throw std::domain_error("grad_check: non-finite value at " + p.name);
      const T numeric = (up - down) / static_cast<T>(2 * step);
      const T denom = std::abs(analytic[i]) + std::abs(numeric) + T(1e-12);
      const double err = static_cast<double>(std::abs(analytic[i] - numeric) / denom);
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = p.name + "[" + std::to_string(i) + "]";
        result.worst_analytic = static_cast<double>(analytic[i]);
        result.worst_numeric = static_cast<double>(numeric);
      }
    }
  }
  return result;
}

}  // namespace ndr
