#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ndr/optim.hpp"
#include "ndr/rng.hpp"
#include "ndr/tensor.hpp"

namespace ndr {

/// [rows, cols] weight drawn from U(-1/sqrt(cols), 1/sqrt(cols)).
template <class T>
Tensor<T> uniform_weight(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  Tensor<T> w(Shape{rows, cols});
  for (T& x : w.data_mut()) x = static_cast<T>(rng.uniform(-bound, bound));
  w.set_requires_grad();
  return w;
}

template <class T>
Tensor<T> filled(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad();
  return t;
}

template <class T>
void push_param(std::vector<Parameter<T>>& out, const std::string& name, const Tensor<T>& t, bool decay) {
  out.push_back(Parameter<T>{name, t, decay});
}

/// Standard sinusoidal embedding of a (possibly negative) position.
template <class T>
void sinusoid_row(double pos, std::size_t d, T* out) {
  for (std::size_t k = 0; k < d; k += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(d));
    out[k] = static_cast<T>(std::sin(pos * freq));
    if (k + 1 < d) out[k + 1] = static_cast<T>(std::cos(pos * freq));
  }
}

template <class T>
Tensor<T> sinusoid_table(const std::vector<double>& positions, std::size_t d) {
  Tensor<T> t(Shape{positions.size(), d});
  for (std::size_t r = 0; r < positions.size(); ++r) sinusoid_row(positions[r], d, t.data_mut().data() + r * d);
  return t;
}

}  // namespace ndr
