#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/tensor.hpp"

namespace ndr {

/// A named trainable tensor. Weight matrices decay; biases and gains do not.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool weight_decay_eligible = true;
};

template <class T>
void zero_grad(std::span<const Parameter<T>> params) {
  for (auto p : params) p.tensor.zero_grad();
}

template <class T>
void check_unique_names(std::span<const Parameter<T>> params) {
  std::set<std::string> seen;
  for (const auto& p : params)
    if (!seen.insert(p.name).second) throw std::logic_error("duplicate parameter name: " + p.name);
}

/// Raised before any parameter is touched when a gradient is NaN or infinite.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& name)
      : std::runtime_error("non-finite gradient in parameter '" + name + "'"), parameter(name) {}
  std::string parameter;
};

/// Global L2 norm over all gradients, accumulated in double.
template <class T>
double grad_norm(std::span<const Parameter<T>> params) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// Rescales all gradients uniformly so the global norm is at most max_norm.
/// Returns the factor applied (1 when no clipping happened).
template <class T>
double clip_gradients(std::span<const Parameter<T>> params, double max_norm) {
  const double norm = grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / (norm + 1e-6);
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T& g : p.tensor.grad_mut()) g = static_cast<T>(g * factor);
  }
  return factor;
}

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a single tensor, in place. `step` is
/// the 1-based update count.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                 const AdamWConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = static_cast<double>(m[i]) / bc1;
    const double vhat = static_cast<double>(v[i]) / bc2;
    param[i] = static_cast<T>(param[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// AdamW with decoupled weight decay applied only to eligible parameters.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }
  std::uint64_t steps() const { return step_; }

  void step(std::span<const Parameter<T>> params) {
    ensure_state(params);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad())
        if (!std::isfinite(g)) throw NonFiniteGradient(p.name);
    }
    ++step_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto t = params[i].tensor;
      if (!t.has_grad()) continue;
      auto data = t.data_mut();
      if (params[i].weight_decay_eligible && cfg_.weight_decay != 0.0) {
        const double keep = 1.0 - cfg_.lr * cfg_.weight_decay;
        for (T& x : data) x = static_cast<T>(x * keep);
      }
      adam_update<T>(data, t.grad(), first_[i], second_[i], step_, cfg_);
    }
  }

  std::vector<std::vector<T>>& first_moments() { return first_; }
  std::vector<std::vector<T>>& second_moments() { return second_; }
  const std::vector<std::vector<T>>& first_moments() const { return first_; }
  const std::vector<std::vector<T>>& second_moments() const { return second_; }
  void set_steps(std::uint64_t s) { step_ = s; }

  void ensure_state(std::span<const Parameter<T>> params) {
    if (first_.size() == params.size()) return;
    first_.clear();
    second_.clear();
    for (const auto& p : params) {
      first_.emplace_back(p.tensor.numel(), T{0});
      second_.emplace_back(p.tensor.numel(), T{0});
    }
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
};

}  // namespace ndr
