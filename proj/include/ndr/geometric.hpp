#pragma once

// Geometric attention weights: A[i,j] = P[i,j] * prod_{k closer to i than j} (1 - P[i,k]).
// "Closer" is distance |i-k|, with the right neighbour winning ties.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "ndr/ops.hpp"

namespace ndr {

/// Sources of target i (0-based) sorted from closest to farthest, excluding i.
inline std::vector<std::size_t> closeness_order(std::size_t i, std::size_t n) {
  std::vector<std::size_t> order;
  order.reserve(n > 0 ? n - 1 : 0);
  for (std::size_t dist = 1; dist < n; ++dist) {
    if (i + dist < n) order.push_back(i + dist);
    if (dist <= i) order.push_back(i - dist);
  }
  return order;
}

/// 1-based variant: geometric_ordering(3, 5) == {4, 2, 5, 1}.
inline std::vector<std::size_t> geometric_ordering(std::size_t i, std::size_t n) {
  if (i < 1 || i > n) throw std::out_of_range("geometric_ordering: target index outside [1, N]");
  auto order = closeness_order(i - 1, n);
  for (auto& k : order) ++k;
  return order;
}

namespace detail {

template <class T>
void check_probabilities(std::span<const T> p, std::size_t n) {
  if (p.size() != n * n) throw ShapeError("geometric_weights: expected N*N probabilities");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T v = p[i * n + j];
      if (i != j && !(v >= T{0} && v <= T{1})) throw std::domain_error("geometric_weights: probability outside [0,1]");
    }
}

}  // namespace detail

/// Value-level weights for one N x N matrix of match probabilities, as a
/// running product of survival terms along the closeness order. The diagonal
/// of P is ignored and A[i,i] = 0.
template <class T>
std::vector<T> geometric_weights(std::span<const T> p, std::size_t n) {
  detail::check_probabilities(p, n);
  std::vector<T> a(n * n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    T survive = 1;
    for (std::size_t k : closeness_order(i, n)) {
      const T pk = p[i * n + k];
      a[i * n + k] = pk * survive;
      survive *= T{1} - pk;
    }
  }
  return a;
}

/// Same weights evaluated in log space, as the differentiable path does:
/// log A = log P + exclusive cumulative sum of log1p(-P).
template <class T>
std::vector<T> geometric_weights_log(std::span<const T> p, std::size_t n) {
  detail::check_probabilities(p, n);
  std::vector<T> a(n * n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    T log_survive = 0;
    for (std::size_t k : closeness_order(i, n)) {
      const T pk = p[i * n + k];
      a[i * n + k] = pk == T{0} ? T{0} : std::exp(std::log(pk) + log_survive);
      log_survive += std::log1p(-pk);
    }
  }
  return a;
}

/// Differentiable weights from score logits z (P = sigmoid(z)) of shape
/// [B, H, N, N]. `pad` has B*N flags; padded sources get P = 0, so they
/// neither receive mass nor shadow farther sources.
template <class T>
Tensor<T> geometric_weights_from_logits(const Tensor<T>& z, const std::vector<std::uint8_t>& pad) {
  if (z.dim() != 4 || z.size(2) != z.size(3)) shape_fail("geometric_weights", z.shape(), "need [B,H,N,N]");
  const std::size_t B = z.size(0), H = z.size(1), N = z.size(2);
  if (!pad.empty() && pad.size() != B * N) shape_fail("geometric_weights", z.shape(), "pad flags must be B*N");
  std::vector<std::vector<std::size_t>> orders(N);
  for (std::size_t i = 0; i < N; ++i) orders[i] = closeness_order(i, N);
  auto is_pad = [&pad, N](std::size_t b, std::size_t k) { return !pad.empty() && pad[b * N + k] != 0; };

  Tensor<T> out(z.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        const std::size_t row = ((b * H + h) * N + i) * N;
        T log_survive = 0;
        for (std::size_t k : orders[i]) {
          if (is_pad(b, k)) continue;
          const T zk = z[row + k];
          out[row + k] = std::exp(detail::log_sigmoid_value(zk) + log_survive);
          log_survive += detail::log_sigmoid_value(-zk);
        }
      }

  if (auto* tape = detail::recording(z)) {
    out.set_requires_grad();
    tape->record([z, out, orders, pad, B, H, N] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gz = z.grad_mut();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t i = 0; i < N; ++i) {
            const std::size_t row = ((b * H + h) * N + i) * N;
            // d log A[j] / d z[j] = sigmoid(-z[j]); d log A[m] / d z[k] = -sigmoid(z[k])
            // for every m farther than k. Walk the order backwards with a suffix sum.
            T farther = 0;
            const auto& order = orders[i];
            for (auto it = order.rbegin(); it != order.rend(); ++it) {
              const std::size_t k = *it;
              if (!pad.empty() && pad[b * N + k]) continue;
              const T zk = z[row + k];
              const T ga = g[row + k] * out[row + k];
              gz[row + k] += ga * detail::sigmoid_value(-zk) - detail::sigmoid_value(zk) * farther;
              farther += ga;
            }
          }
    });
  }
  return out;
}

}  // namespace ndr
