#pragma once

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when a tape is active and some input requires gradients,
// records a closure that accumulates into the inputs' gradient slots.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ndr/rng.hpp"
#include "ndr/tape.hpp"
#include "ndr/tensor.hpp"

namespace ndr {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || db == 1) {
      out[i] = da;
    } else if (da == 1) {
      out[i] = db;
    } else {
      shape_fail(op, a, b);
    }
  }
  return out;
}

/// For every linear index of `out`, the linear index of the broadcast source.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t lead = r - in.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > lead;) {
    const std::size_t d = in[i - lead];
    stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  std::vector<std::size_t> idx(numel(out));
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    idx[n] = cur;
    for (std::size_t i = r; i-- > 0;) {
      ++counter[i];
      cur += stride[i];
      if (counter[i] < out[i]) break;
      cur -= stride[i] * out[i];
      counter[i] = 0;
    }
  }
  return idx;
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      T* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

template <class T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C) {
  std::vector<T> bt(n * k);
  transpose_into(n, k, B, bt.data());
  gemm_nn(m, n, k, A, bt.data(), C);
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i]);
  if (auto* tape = recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, df] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += df(x[i], out[i], g[i]);
    });
  }
  return out;
}

template <class T, class F, class GA, class GB>
Tensor<T> binary(std::string_view name, const Tensor<T>& a, const Tensor<T>& b, F f, GA ga, GB gb) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
    if (auto* tape = recording(a, b)) {
      out.set_requires_grad();
      tape->record([a, b, out, ga, gb] {
        if (!out.has_grad()) return;
        auto g = out.grad();
        if (a.requires_grad()) {
          auto gx = a.grad_mut();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += ga(a[i], b[i], g[i]);
        }
        if (b.requires_grad()) {
          auto gy = b.grad_mut();
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] += gb(a[i], b[i], g[i]);
        }
      });
    }
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape(), name);
  auto ia = broadcast_index(a.shape(), shape);
  auto ib = broadcast_index(b.shape(), shape);
  Tensor<T> out(shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a[ia[i]], b[ib[i]]);
  if (auto* tape = recording(a, b)) {
    out.set_requires_grad();
    tape->record([a, b, out, ga, gb, ia = std::move(ia), ib = std::move(ib)] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto gx = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[ia[i]] += ga(a[ia[i]], b[ib[i]], g[i]);
      }
      if (b.requires_grad()) {
        auto gy = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gy[ib[i]] += gb(a[ia[i]], b[ib[i]], g[i]);
      }
    });
  }
  return out;
}

template <class T>
T sigmoid_value(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
T log_sigmoid_value(T x) {
  return std::min(x, T{0}) - std::log1p(std::exp(-std::abs(x)));
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
inline void axis_blocks(const Shape& s, int axis, std::size_t& outer, std::size_t& len, std::size_t& inner,
                        std::string_view op) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_fail(op, s, "axis out of range");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
  len = s[static_cast<std::size_t>(axis)];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T, T g) { return g * c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

/// c - x
template <class T>
Tensor<T> rsub_scalar(T c, const Tensor<T>& x) {
  return detail::unary(x, [c](T v) { return c - v; }, [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T, T g) { return v > T{0} ? g : T{0}; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::sigmoid_value(v); }, [](T, T y, T g) { return g * y * (T{1} - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y, T g) { return g * (T{1} - y * y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <class T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::log_sigmoid_value(v); },
      [](T v, T, T g) { return g * detail::sigmoid_value(-v); });
}

/// (1 - g) * h + g * u, all operands of one shape. A gate of exactly zero
/// returns h unchanged.
template <class T>
Tensor<T> copy_gate(const Tensor<T>& g, const Tensor<T>& u, const Tensor<T>& h) {
  if (g.shape() != u.shape()) shape_fail("copy_gate", g.shape(), u.shape());
  if (g.shape() != h.shape()) shape_fail("copy_gate", g.shape(), h.shape());
  Tensor<T> out(h.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = (T{1} - g[i]) * h[i] + g[i] * u[i];
  if (auto* tape = detail::recording(g, u, h)) {
    out.set_requires_grad();
    tape->record([g, u, h, out] {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (g.requires_grad()) {
        auto gg = g.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) gg[i] += go[i] * (u[i] - h[i]);
      }
      if (u.requires_grad()) {
        auto gu = u.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) gu[i] += go[i] * g[i];
      }
      if (h.requires_grad()) {
        auto gh = h.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) gh[i] += go[i] * (T{1} - g[i]);
      }
    });
  }
  return out;
}

/// Replaces entries where the (broadcast) mask is nonzero with `value`.
template <class T>
Tensor<T> masked_fill(const Tensor<T>& x, const Tensor<T>& mask, T value) {
  const Shape shape = detail::broadcast_shape(x.shape(), mask.shape(), "masked_fill");
  if (shape != x.shape()) shape_fail("masked_fill", x.shape(), mask.shape());
  auto im = detail::broadcast_index(mask.shape(), shape);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask[im[i]] != T{0} ? value : x[i];
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, mask, out, im = std::move(im)] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[im[i]] == T{0}) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  Tensor<T> out(std::move(shape), x.storage());
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.dim() < 2) shape_fail("transpose", x.shape(), "need rank >= 2");
  const std::size_t m = x.size(-2), n = x.size(-1), batch = x.numel() / (m * n);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < batch; ++b) detail::transpose_into(m, n, x.data().data() + b * m * n, out.data_mut().data() + b * m * n);
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, m, n, batch] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
    });
  }
  return out;
}

/// [a, b, c, d] -> [a, c, b, d]
template <class T>
Tensor<T> swap_axes12(const Tensor<T>& x) {
  if (x.dim() != 4) shape_fail("swap_axes12", x.shape(), "need rank 4");
  const std::size_t A = x.size(0), B = x.size(1), C = x.size(2), D = x.size(3);
  Tensor<T> out(Shape{A, C, B, D});
  auto src = [=](std::size_t a, std::size_t b, std::size_t c) { return ((a * B + b) * C + c) * D; };
  auto dst = [=](std::size_t a, std::size_t b, std::size_t c) { return ((a * C + c) * B + b) * D; };
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(x.data().data() + src(a, b, c), D, out.data_mut().data() + dst(a, b, c));
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, A, B, C, D, src, dst] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d = 0; d < D; ++d) gx[src(a, b, c) + d] += g[dst(a, b, c) + d];
    });
  }
  return out;
}

/// [B, N, H*dh] -> [B, H, N, dh]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.dim() != 3 || x.size(2) % heads != 0) shape_fail("split_heads", x.shape(), "need [B,N,H*dh]");
  return swap_axes12(reshape(x, Shape{x.size(0), x.size(1), heads, x.size(2) / heads}));
}

/// [B, H, N, dh] -> [B, N, H*dh]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.dim() != 4) shape_fail("merge_heads", x.shape(), "need [B,H,N,dh]");
  const Tensor<T> y = swap_axes12(x);
  return reshape(y, Shape{y.size(0), y.size(1), y.size(2) * y.size(3)});
}

/// Contiguous range [start, start+len) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t len) {
  std::size_t outer, extent, inner;
  detail::axis_blocks(x.shape(), axis, outer, extent, inner, "slice");
  if (start + len > extent) shape_fail("slice", x.shape(), "range exceeds axis extent");
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis < 0 ? axis + static_cast<int>(x.dim()) : axis)] = len;
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * extent + start) * inner, len * inner, out.data_mut().data() + o * len * inner);
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, outer, extent, inner, start, len] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len * inner; ++i) gx[(o * extent + start) * inner + i] += g[o * len * inner + i];
    });
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::size_t>& sizes) {
  std::size_t outer, extent, inner;
  detail::axis_blocks(x.shape(), axis, outer, extent, inner, "split");
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != extent)
    shape_fail("split", x.shape(), "sizes do not sum to axis extent");
  std::vector<Tensor<T>> parts;
  std::size_t start = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = xs.front().shape();
  const std::size_t ax = static_cast<std::size_t>(axis < 0 ? axis + static_cast<int>(ref.size()) : axis);
  if (ax >= ref.size()) shape_fail("concat", ref, "axis out of range");
  Shape shape = ref;
  shape[ax] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = ref;
    if (a.size() != b.size()) shape_fail("concat", ref, x.shape());
    a[ax] = b[ax] = 0;
    if (a != b) shape_fail("concat", ref, x.shape());
    shape[ax] += x.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= ref[i];
  for (std::size_t i = ax + 1; i < ref.size(); ++i) inner *= ref[i];
  Tensor<T> out(shape);
  const std::size_t total = shape[ax];
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& x : xs) {
    const std::size_t len = x.shape()[ax];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.data().data() + o * len * inner, len * inner, out.data_mut().data() + (o * total + offset) * inner);
    offsets.push_back(offset);
    offset += len;
  }
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  auto* tape = Tape<T>::active();
  if (tape && any) {
    out.set_requires_grad();
    tape->record([xs, out, offsets, outer, inner, total, ax] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t t = 0; t < xs.size(); ++t) {
        if (!xs[t].requires_grad()) continue;
        const std::size_t len = xs[t].shape()[ax];
        auto gx = xs[t].grad_mut();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < len * inner; ++i) gx[o * len * inner + i] += g[(o * total + offsets[t]) * inner + i];
      }
    });
  }
  return out;
}

/// x[b, idx[b], :] for x of shape [B, N, d]; returns [B, d].
template <class T>
Tensor<T> select_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  if (x.dim() != 3 || idx.size() != x.size(0)) shape_fail("select_rows", x.shape(), "need [B,N,d] and B indices");
  const std::size_t B = x.size(0), N = x.size(1), d = x.size(2);
  Tensor<T> out(Shape{B, d});
  for (std::size_t b = 0; b < B; ++b) {
    if (idx[b] >= N) throw std::out_of_range("select_rows: index out of range");
    std::copy_n(x.data().data() + (b * N + idx[b]) * d, d, out.data_mut().data() + b * d);
  }
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, idx, N, d] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t b = 0; b < idx.size(); ++b)
        for (std::size_t j = 0; j < d; ++j) gx[(b * N + idx[b]) * d + j] += g[b * d + j];
    });
  }
  return out;
}

/// Relative-offset gather: for M of shape [..., N, 2N-1] whose last axis is
/// indexed by offset (i - j) + N - 1, returns S[..., i, j] = M[..., i, i-j+N-1].
template <class T>
Tensor<T> rel_gather(const Tensor<T>& m) {
  if (m.dim() < 2) shape_fail("rel_gather", m.shape(), "need rank >= 2");
  const std::size_t N = m.size(-2);
  if (m.size(-1) != 2 * N - 1) shape_fail("rel_gather", m.shape(), "last axis must be 2N-1");
  const std::size_t W = 2 * N - 1, batch = m.numel() / (N * W);
  Shape shape = m.shape();
  shape.back() = N;
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) out[(b * N + i) * N + j] = m[(b * N + i) * W + (i + N - 1 - j)];
  if (auto* tape = detail::recording(m)) {
    out.set_requires_grad();
    tape->record([m, out, N, W, batch] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gm = m.grad_mut();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < N; ++j) gm[(b * N + i) * W + (i + N - 1 - j)] += g[(b * N + i) * N + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------- linear algebra

/// Batched matrix product over the last two axes; leading axes broadcast.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() < 2 || b.dim() < 2) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.size(-2), k = a.size(-1), n = b.size(-1);
  if (b.size(-2) != k) shape_fail("matmul", a.shape(), b.shape());
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape shape = detail::broadcast_shape(ba, bb, "matmul");
  auto ia = detail::broadcast_index(ba, shape);
  auto ib = detail::broadcast_index(bb, shape);
  const std::size_t batch = ia.size();
  shape.push_back(m);
  shape.push_back(n);
  Tensor<T> out(shape);
  for (std::size_t t = 0; t < batch; ++t)
    detail::gemm_nn(m, n, k, a.data().data() + ia[t] * m * k, b.data().data() + ib[t] * k * n,
                    out.data_mut().data() + t * m * n);
  if (auto* tape = detail::recording(a, b)) {
    out.set_requires_grad();
    tape->record([a, b, out, m, n, k, ia = std::move(ia), ib = std::move(ib)] {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      for (std::size_t t = 0; t < ia.size(); ++t) {
        if (a.requires_grad())
          detail::gemm_nt(m, k, n, g + t * m * n, b.data().data() + ib[t] * k * n, a.grad_mut().data() + ia[t] * m * k);
        if (b.requires_grad())
          detail::gemm_tn(m, n, k, a.data().data() + ia[t] * m * k, g + t * m * n, b.grad_mut().data() + ib[t] * k * n);
      }
    });
  }
  return out;
}

/// x W^T + bias, with x [..., in], W [out, in], bias [out] (optional).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  if (w.dim() != 2 || x.dim() < 1 || x.size(-1) != w.size(1)) shape_fail("linear", x.shape(), w.shape());
  const std::size_t in = w.size(1), outd = w.size(0), rows = x.numel() / in;
  if (bias.defined() && bias.numel() != outd) shape_fail("linear", w.shape(), bias.shape());
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor<T> out(shape);
  T* y = out.data_mut().data();
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.data().data(), outd, y + r * outd);
  std::vector<T> wt(in * outd);
  detail::transpose_into(outd, in, w.data().data(), wt.data());
  detail::gemm_nn(rows, outd, in, x.data().data(), wt.data(), y);
  Tape<T>* tape = Tape<T>::active();
  const bool track = x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad());
  if (tape && track) {
    out.set_requires_grad();
    tape->record([x, w, bias, out, in, outd, rows] {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (x.requires_grad()) detail::gemm_nn(rows, in, outd, g, w.data().data(), x.grad_mut().data());
      if (w.requires_grad()) detail::gemm_tn(rows, in, outd, g, x.data().data(), w.grad_mut().data());
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- normalization

template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t n = x.size(-1), rows = x.numel() / n;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T* o = out.data_mut().data() + r * n;
    const T mx = *std::max_element(in, in + n);
    if (!(mx > -std::numeric_limits<T>::infinity())) throw std::domain_error("softmax: row has no finite entry");
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, n, rows] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * out[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += out[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

/// Normalizes over the last axis; zero-variance rows map to `bias`.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t n = x.size(-1), rows = x.numel() / n;
  if (gain.numel() != n) shape_fail("layer_norm", x.shape(), gain.shape());
  if (bias.numel() != n) shape_fail("layer_norm", x.shape(), bias.shape());
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * is;
      out[r * n + j] = xhat[r * n + j] * gain[j] + bias[j];
    }
  }
  if (auto* tape = detail::recording(x, gain, bias)) {
    out.set_requires_grad();
    tape->record([x, gain, bias, out, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (gain.requires_grad()) {
        auto gg = gain.grad_mut();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T gh = g[r * n + j] * gain[j];
            m1 += gh;
            m2 += gh * xhat[r * n + j];
          }
          m1 /= static_cast<T>(n);
          m2 /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T gh = g[r * n + j] * gain[j];
            gx[r * n + j] += inv_std[r] * (gh - m1 - xhat[r * n + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions & scans

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out] {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto gx = x.grad_mut();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> cumsum(const Tensor<T>& x, int axis) {
  std::size_t outer, len, inner;
  detail::axis_blocks(x.shape(), axis, outer, len, inner, "cumsum");
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T acc = 0;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t at = (o * len + t) * inner + i;
        acc += x[at];
        out[at] = acc;
      }
    }
  if (auto* tape = detail::recording(x)) {
    out.set_requires_grad();
    tape->record([x, out, outer, len, inner] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          T acc = 0;
          for (std::size_t t = len; t-- > 0;) {
            const std::size_t at = (o * len + t) * inner + i;
            acc += g[at];
            gx[at] += acc;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------- lookup, dropout, loss

/// Rows of `table` [V, d] selected by ids; result shape is ids_shape + [d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids, Shape ids_shape) {
  if (table.dim() != 2) shape_fail("embedding", table.shape(), "table must be [V,d]");
  if (numel(ids_shape) != ids.size()) shape_fail("embedding", ids_shape, "ids count mismatch");
  const std::size_t V = table.size(0), d = table.size(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw std::out_of_range("embedding: token id " + std::to_string(id));
  ids_shape.push_back(d);
  Tensor<T> out(ids_shape);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * d, d, out.data_mut().data() + r * d);
  if (auto* tape = detail::recording(table)) {
    out.set_requires_grad();
    tape->record([table, ids, out, d] {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.grad_mut();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[r]) * d + j] += g[r * d + j];
    });
  }
  return out;
}

/// Inverted dropout; identity outside training or at p = 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: probability must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  for (auto& m : mask.data_mut()) m = rng.uniform() < p ? T{0} : keep_scale;
  return mul(x, mask);
}

/// Mean cross-entropy of logits [B, C] against integer class targets.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.dim() != 2 || logits.size(0) != targets.size())
    shape_fail("cross_entropy", logits.shape(), "need [B,C] logits and B targets");
  const std::size_t B = logits.size(0), C = logits.size(1);
  std::vector<T> prob(B * C);
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const int t = targets[b];
    if (t < 0 || static_cast<std::size_t>(t) >= C) throw std::out_of_range("cross_entropy: target " + std::to_string(t));
    const T* row = logits.data().data() + b * C;
    const T mx = *std::max_element(row, row + C);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += (prob[b * C + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] /= z;
    total += -(row[t] - mx - std::log(z));
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(B));
  if (auto* tape = detail::recording(logits)) {
    out.set_requires_grad();
    std::vector<int> tg(targets.begin(), targets.end());
    tape->record([logits, out, prob = std::move(prob), tg = std::move(tg), B, C] {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(B);
      auto gl = logits.grad_mut();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          gl[b * C + c] += g * (prob[b * C + c] - (static_cast<int>(c) == tg[b] ? T{1} : T{0}));
    });
  }
  return out;
}

}  // namespace ndr
