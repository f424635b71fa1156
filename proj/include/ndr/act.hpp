#pragma once

// Adaptive computation time over the shared step. Both variants find a
// readout step per column from cumulative halting units; columns keep being
// transformed until every column has halted.
//
//   A: o = sum_{t<=T} p_t h_t with p_T = R = 1 - sum_{t<T} p_hat_t, and T
//      forced to T_max when the threshold is never reached.
//   U: o_t = p_t h_t + (1 - p_t) o_{t-1}; a column that reaches T_max
//      without crossing the threshold gets no remainder (R = 0).

#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/attention.hpp"

namespace ndr {

enum class ActVariant { A, U };

inline std::string to_string(ActVariant v) { return v == ActVariant::A ? "A" : "U"; }

inline ActVariant act_variant_from_string(const std::string& s) {
  if (s == "A" || s == "a") return ActVariant::A;
  if (s == "U" || s == "u") return ActVariant::U;
  throw std::invalid_argument("unknown ACT variant: " + s);
}

struct ActConfig {
  ActVariant variant = ActVariant::A;
  std::size_t t_max = 1;
  double epsilon = 0.01;
  double reg_weight = 0.03;

  void validate() const {
    if (t_max < 1) throw std::invalid_argument("act: T_max must be at least 1");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("act: epsilon must lie in (0,1)");
    if (reg_weight < 0.0) throw std::invalid_argument("act: regularizer weight must be nonnegative");
  }
};

template <class T>
struct HaltingParams {
  Tensor<T> w_h, b_h;  // [1, d], [1]

  static HaltingParams init(std::size_t d, Rng& rng) { return {uniform_weight<T>(1, d, rng), filled<T>({1}, 0)}; }

  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    push_param(out, prefix + "w_h", w_h, true);
    push_param(out, prefix + "b_h", b_h, false);
  }
};

/// p_hat = sigmoid(W_H h + b_H), shape [..., 1].
template <class T>
Tensor<T> act_halting(const Tensor<T>& h, const HaltingParams<T>& p) {
  return sigmoid(linear(h, p.w_h, p.b_h));
}

/// Value-level halting decision for one column.
struct HaltingColumn {
  enum class Event { idle, running, halting, exhausted };

  double cumulative = 0.0;  // sum of p_hat over steps before the current one
  std::size_t steps = 0;
  double remainder = 0.0;
  bool stopped = false;

  Event advance(double p_hat, std::size_t t, const ActConfig& cfg) {
    if (stopped) return Event::idle;
    steps = t;
    if (cumulative + p_hat >= 1.0 - cfg.epsilon || (t >= cfg.t_max && cfg.variant == ActVariant::A)) {
      stopped = true;
      remainder = 1.0 - cumulative;
      return Event::halting;
    }
    cumulative += p_hat;
    if (t >= cfg.t_max) {
      stopped = true;
      return Event::exhausted;
    }
    return Event::running;
  }
};

struct HaltingSchedule {
  std::size_t steps = 0;
  double remainder = 0.0;
  bool halted = false;        // threshold crossed before or at T_max
  std::vector<double> probs;  // p^(t) for t = 1..steps
};

/// Halting schedule of one column given its p_hat sequence (at least T_max
/// values unless it halts earlier).
inline HaltingSchedule act_schedule(const std::vector<double>& p_hat, const ActConfig& cfg) {
  cfg.validate();
  HaltingColumn col;
  HaltingSchedule s;
  for (std::size_t t = 1; t <= cfg.t_max; ++t) {
    if (t > p_hat.size()) throw std::invalid_argument("act_schedule: p_hat sequence ended before halting");
    const auto ev = col.advance(p_hat[t - 1], t, cfg);
    if (ev == HaltingColumn::Event::halting) {
      s.probs.push_back(col.remainder);
      s.halted = col.cumulative + p_hat[t - 1] >= 1.0 - cfg.epsilon;
      break;
    }
    s.probs.push_back(p_hat[t - 1]);
    if (ev == HaltingColumn::Event::exhausted) break;
  }
  s.steps = col.steps;
  s.remainder = col.remainder;
  return s;
}

/// Accumulates the readout of a batch [B, N, d] one step at a time.
template <class T>
class ActReadout {
 public:
  ActReadout(const ActConfig& cfg, const AttentionMask& mask, std::size_t d)
      : cfg_(cfg), mask_(mask), d_(d), columns_(mask.batch * mask.length) {
    cfg_.validate();
    for (std::size_t i = 0; i < columns_.size(); ++i)
      if (!mask.valid[i]) columns_[i].stopped = true;
    const Shape col_shape{mask.batch, mask.length, 1};
    output_ = Tensor<T>(Shape{mask.batch, mask.length, d}, T{0});
    cumulative_ = Tensor<T>(col_shape, T{0});
    remainder_ = Tensor<T>(col_shape, T{0});
  }

  /// h: state after step t; p_hat: act_halting(h). Steps are 1-based and consecutive.
  void observe(const Tensor<T>& h, const Tensor<T>& p_hat) {
    if (done()) throw std::logic_error("act: every column has already stopped");
    if (h.shape() != output_.shape()) shape_fail("act readout", h.shape(), shape_str(output_.shape()));
    if (p_hat.shape() != cumulative_.shape()) shape_fail("act readout", p_hat.shape(), shape_str(cumulative_.shape()));
    ++t_;
    Tensor<T> running(cumulative_.shape(), T{0}), halting(cumulative_.shape(), T{0});
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      switch (columns_[i].advance(static_cast<double>(p_hat[i]), t_, cfg_)) {
        case HaltingColumn::Event::running:
        case HaltingColumn::Event::exhausted: running[i] = T{1}; break;
        case HaltingColumn::Event::halting: halting[i] = T{1}; break;
        case HaltingColumn::Event::idle: break;
      }
    }
    const Tensor<T> left = rsub_scalar(T{1}, cumulative_);
    const Tensor<T> weight = add(mul(p_hat, running), mul(left, halting));
    remainder_ = add(remainder_, mul(left, halting));
    cumulative_ = add(cumulative_, mul(p_hat, running));
    if (cfg_.variant == ActVariant::A)
      output_ = add(output_, mul(weight, h));
    else
      output_ = add(mul(weight, h), mul(rsub_scalar(T{1}, weight), output_));
  }

  bool done() const {
    for (const auto& c : columns_)
      if (!c.stopped) return false;
    return true;
  }

  std::size_t steps_taken() const { return t_; }
  const Tensor<T>& output() const { return output_; }
  const Tensor<T>& remainders() const { return remainder_; }

  /// T^i per column (0 for padding), row-major [B, N].
  std::vector<std::size_t> ponder_steps() const {
    std::vector<std::size_t> out(columns_.size());
    for (std::size_t i = 0; i < columns_.size(); ++i) out[i] = columns_[i].steps;
    return out;
  }

  /// reg_weight * mean over sequences of (1/N_b) sum_i R^i.
  Tensor<T> loss() const {
    Tensor<T> w(remainder_.shape(), T{0});
    for (std::size_t b = 0; b < mask_.batch; ++b) {
      std::size_t n = 0;
      for (std::size_t j = 0; j < mask_.length; ++j) n += mask_.is_valid(b, j) ? 1 : 0;
      for (std::size_t j = 0; j < mask_.length; ++j)
        if (mask_.is_valid(b, j))
          w[b * mask_.length + j] = static_cast<T>(cfg_.reg_weight / (static_cast<double>(n) * mask_.batch));
    }
    return sum(mul(remainder_, w));
  }

 private:
  ActConfig cfg_;
  AttentionMask mask_;
  std::size_t d_;
  std::vector<HaltingColumn> columns_;
  std::size_t t_ = 0;
  Tensor<T> output_, cumulative_, remainder_;
};

}  // namespace ndr
