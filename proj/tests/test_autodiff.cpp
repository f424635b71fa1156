#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "ndr/checks.hpp"
#include "ndr/grad_check.hpp"
#include "ndr/init.hpp"
#include "ndr/ops.hpp"
#include "ndr/optim.hpp"
#include "ndr/rng.hpp"

using namespace ndr;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.data_mut()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar objective r . f(x) for a fixed random r, so every output entry gets
// a distinct upstream gradient.
template <class F>
double worst_rel_error(F f, std::vector<Parameter<double>> inputs, std::uint64_t seed = 3) {
  Rng rng = Rng::stream(seed, "probe");
  Tensor<double> probe;
  auto objective = [&] {
    Tensor<double> y = f();
    if (!probe.defined()) probe = random_tensor(y.shape(), rng);
    return sum(mul(y, probe));
  };
  return grad_check(objective, inputs, 1e-6).max_rel_error;
}

Parameter<double> param(const std::string& name, Tensor<double> t) {
  t.set_requires_grad();
  return {name, t, true};
}

}  // namespace

TEST(Matmul, MatchesTripleLoop) {
  Rng rng = Rng::stream(1, "mm");
  const auto a = random_tensor({2, 3, 4, 5}, rng);
  const auto b = random_tensor({1, 3, 5, 6}, rng);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 4, 6}));
  for (std::size_t x = 0; x < 2; ++x)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
          double s = 0;
          for (std::size_t k = 0; k < 5; ++k) s += a[((x * 3 + h) * 4 + i) * 5 + k] * b[(h * 5 + k) * 6 + j];
          EXPECT_NEAR(c[((x * 3 + h) * 4 + i) * 6 + j], s, 1e-12);
        }
}

TEST(Linear, MatchesRowTimesTransposedWeight) {
  Rng rng = Rng::stream(1, "lin");
  const auto x = random_tensor({3, 4}, rng);
  const auto w = random_tensor({2, 4}, rng);
  const auto b = random_tensor({2}, rng);
  const auto y = linear(x, w, b);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t o = 0; o < 2; ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < 4; ++k) s += x[r * 4 + k] * w[o * 4 + k];
      EXPECT_NEAR(y[r * 2 + o], s, 1e-12);
    }
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesVanish) {
  Tensor<double> x(Shape{2, 3}, std::vector<double>{1, 2, 3, -INFINITY, 0, 0});
  const auto y = softmax_last(x);
  EXPECT_NEAR(y[0] + y[1] + y[2], 1.0, 1e-15);
  EXPECT_EQ(y[3], 0.0);
  EXPECT_NEAR(y[4], 0.5, 1e-15);
  EXPECT_NEAR(y[2], std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)), 1e-15);
}

TEST(LayerNorm, ZeroMeanUnitVarianceBeforeAffine) {
  Rng rng = Rng::stream(1, "ln");
  const auto x = random_tensor({4, 8}, rng, -3, 3);
  const auto y = layer_norm(x, Tensor<double>(Shape{8}, 1.0), Tensor<double>(Shape{8}, 0.0), 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y[r * 8 + c];
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y[r * 8 + c] - m) * (y[r * 8 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 8, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, MatchesLogSumExp) {
  Tensor<double> logits(Shape{2, 3}, std::vector<double>{0.5, -1.0, 2.0, 3.0, 3.0, 3.0});
  const std::vector<int> t{2, 0};
  const double l0 = std::log(std::exp(0.5) + std::exp(-1.0) + std::exp(2.0)) - 2.0;
  const double l1 = std::log(3.0);
  EXPECT_NEAR(cross_entropy(logits, t).item(), (l0 + l1) / 2, 1e-14);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  Tensor<float> logits(Shape{5, 8}, 0.0f);
  const std::vector<int> t{0, 1, 2, 3, 7};
  EXPECT_NEAR(cross_entropy(logits, t).item(), std::log(8.0), 1e-6);
}

TEST(RelGather, PicksOffsetIMinusJ) {
  const std::size_t N = 4, W = 2 * N - 1;
  Tensor<double> m(Shape{N, W});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < W; ++c) m[i * W + c] = 100.0 * static_cast<double>(i) + static_cast<double>(c) - (N - 1.0);
  const auto s = rel_gather(m);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j)
      EXPECT_EQ(s[i * N + j], 100.0 * static_cast<double>(i) + static_cast<double>(i) - static_cast<double>(j));
}

TEST(Gradients, ElementwiseAndReductions) {
  Rng rng = Rng::stream(2, "ew");
  auto a = param("a", random_tensor({3, 4}, rng));
  auto b = param("b", random_tensor({1, 4}, rng));
  EXPECT_LT(worst_rel_error([&] { return mul(add(a.tensor, b.tensor), sigmoid(sub(a.tensor, b.tensor))); }, {a, b}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return tanh(relu(add_scalar(a.tensor, 0.3))); }, {a}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return log_sigmoid(scale(a.tensor, 2.5)); }, {a}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return cumsum(exp(a.tensor), 1); }, {a}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return mean(mul(a.tensor, a.tensor)); }, {a}), 1e-7);
}

TEST(Gradients, LinearAlgebraAndShapes) {
  Rng rng = Rng::stream(2, "la");
  auto x = param("x", random_tensor({2, 3, 4}, rng));
  auto w = param("w", random_tensor({5, 4}, rng));
  auto bias = param("bias", random_tensor({5}, rng));
  EXPECT_LT(worst_rel_error([&] { return linear(x.tensor, w.tensor, bias.tensor); }, {x, w, bias}), 1e-7);
  auto p = param("p", random_tensor({2, 2, 3, 4}, rng));
  auto q = param("q", random_tensor({2, 2, 4, 3}, rng));
  EXPECT_LT(worst_rel_error([&] { return matmul(p.tensor, transpose_last2(transpose_last2(q.tensor))); }, {p, q}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return merge_heads(swap_axes12(swap_axes12(split_heads(x.tensor, 2)))); }, {x}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return concat(std::vector<Tensor<double>>{slice(x.tensor, 2, 1, 2), x.tensor}, 2); }, {x}), 1e-7);
  auto m = param("m", random_tensor({2, 3, 5}, rng));
  EXPECT_LT(worst_rel_error([&] { return rel_gather(m.tensor); }, {m}), 1e-7);
  EXPECT_LT(worst_rel_error([&] { return select_rows(x.tensor, {2, 0}); }, {x}), 1e-7);
}

TEST(Gradients, NormalizationAndLosses) {
  Rng rng = Rng::stream(2, "nl");
  auto x = param("x", random_tensor({3, 6}, rng, -2, 2));
  auto g = param("g", random_tensor({6}, rng, 0.5, 1.5));
  auto b = param("b", random_tensor({6}, rng));
  EXPECT_LT(worst_rel_error([&] { return layer_norm(x.tensor, g.tensor, b.tensor); }, {x, g, b}), 1e-6);
  EXPECT_LT(worst_rel_error([&] { return softmax_last(x.tensor); }, {x}), 1e-7);
  const std::vector<int> t{1, 5, 0};
  EXPECT_LT(worst_rel_error([&] { return cross_entropy(x.tensor, t); }, {x}), 1e-7);
  auto u = param("u", random_tensor({3, 6}, rng));
  auto gate = param("gate", random_tensor({3, 6}, rng, 0, 1));
  EXPECT_LT(worst_rel_error([&] { return copy_gate(gate.tensor, u.tensor, x.tensor); }, {gate, u, x}), 1e-7);
}

TEST(Gradients, BuiltInOpsCheckPasses) { EXPECT_LT(ops_grad_check().max_rel_error, 1e-6); }

TEST(Tape, GradientsAccumulateAcrossUses) {
  Tensor<double> x(Shape{1}, 3.0);
  x.set_requires_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const auto y = add(mul(x, x), x);  // dy/dx = 2x + 1
    tape.backward(sum(y));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tape, NoRecordingWithoutActiveTape) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad();
  const auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUnchanged) {
  Rng rng = Rng::stream(4, "opt");
  auto w = param("w", random_tensor({3, 3}, rng));
  const std::vector<double> before(w.tensor.data().begin(), w.tensor.data().end());
  AdamW<double> opt(AdamWConfig{0.0, 0.1});
  std::vector<Parameter<double>> ps{w};
  for (int i = 0; i < 5; ++i) {
    w.tensor.zero_grad();
    for (auto& g : w.tensor.grad_mut()) g = rng.uniform(-1, 1);
    opt.step(std::span<const Parameter<double>>(ps));
  }
  EXPECT_EQ(std::vector<double>(w.tensor.data().begin(), w.tensor.data().end()), before);
}

TEST(Optimizer, FirstStepMatchesHandComputedAdamW) {
  Tensor<double> w(Shape{2}, std::vector<double>{1.0, -2.0});
  w.set_requires_grad();
  std::vector<Parameter<double>> ps{{"w", w, true}};
  w.grad_mut()[0] = 0.5;
  w.grad_mut()[1] = -0.25;
  const double lr = 0.1, wd = 0.01;
  AdamW<double> opt(AdamWConfig{lr, wd});
  opt.step(std::span<const Parameter<double>>(ps));
  // Bias-corrected first step moves each coordinate by lr * sign(g) (up to eps),
  // plus decoupled decay lr * wd * w.
  EXPECT_NEAR(w[0], 1.0 - lr * wd * 1.0 - lr * 0.5 / (0.5 + 1e-8), 1e-9);
  EXPECT_NEAR(w[1], -2.0 - lr * wd * -2.0 + lr * 0.25 / (0.25 + 1e-8), 1e-9);
}

TEST(Optimizer, DecayOnlyTouchesEligibleParameters) {
  Tensor<double> a(Shape{1}, 1.0), b(Shape{1}, 1.0);
  a.set_requires_grad();
  b.set_requires_grad();
  std::vector<Parameter<double>> ps{{"a", a, true}, {"b", b, false}};
  a.grad_mut()[0] = 0.0;
  b.grad_mut()[0] = 0.0;
  AdamW<double> opt(AdamWConfig{0.1, 0.5});
  opt.step(std::span<const Parameter<double>>(ps));
  EXPECT_LT(a[0], 1.0);
  EXPECT_EQ(b[0], 1.0);
}

TEST(Optimizer, NonFiniteGradientIsRejectedBeforeAnyUpdate) {
  Tensor<double> a(Shape{1}, 1.0), b(Shape{1}, 1.0);
  a.set_requires_grad();
  b.set_requires_grad();
  std::vector<Parameter<double>> ps{{"a", a, true}, {"b", b, true}};
  a.grad_mut()[0] = 1.0;
  b.grad_mut()[0] = NAN;
  AdamW<double> opt(AdamWConfig{0.1, 0.0});
  EXPECT_THROW(opt.step(std::span<const Parameter<double>>(ps)), NonFiniteGradient);
  EXPECT_EQ(a[0], 1.0);
}

TEST(Clipping, PostClipNormNeverExceedsThreshold) {
  Rng rng = Rng::stream(5, "clip");
  for (int trial = 0; trial < 200; ++trial) {
    auto w = param("w", random_tensor({4, 4}, rng));
    auto v = param("v", random_tensor({7}, rng));
    const double mag = std::pow(10.0, rng.uniform(-3, 3));
    for (auto& g : w.tensor.grad_mut()) g = mag * rng.uniform(-1, 1);
    for (auto& g : v.tensor.grad_mut()) g = mag * rng.uniform(-1, 1);
    std::vector<Parameter<double>> ps{w, v};
    const double before = grad_norm(std::span<const Parameter<double>>(ps));
    const double threshold = rng.uniform(0.1, 5.0);
    clip_gradients(std::span<const Parameter<double>>(ps), threshold);
    const double after = grad_norm(std::span<const Parameter<double>>(ps));
    EXPECT_LE(after, threshold + 1e-6);
    if (before <= threshold) {
      EXPECT_EQ(after, before);
    }
  }
}

TEST(Rng, NamedStreamsAreReproducibleAndDistinct) {
  Rng a = Rng::stream(9, "x"), b = Rng::stream(9, "x"), c = Rng::stream(9, "y"), d = Rng::stream(10, "x");
  std::vector<std::uint64_t> va, vb, vc, vd;
  for (int i = 0; i < 16; ++i) {
    va.push_back(a());
    vb.push_back(b());
    vc.push_back(c());
    vd.push_back(d());
  }
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(va, vd);
}

TEST(Rng, StateRoundTripsThroughKeyAndCounter) {
  Rng a = Rng::stream(3, "s");
  for (int i = 0; i < 5; ++i) a();
  Rng b(a.key(), a.counter());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
}

TEST(Rng, BelowIsRoughlyUniform) {
  Rng r = Rng::stream(1, "below");
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}
