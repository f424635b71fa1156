#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ndr/checks.hpp"
#include "ndr/layer.hpp"
#include "ndr/model.hpp"

using namespace ndr;

namespace {

const std::vector<std::string> kVariants{"baseline", "rel", "rel_gate", "absrel_gate", "geom", "ndr"};

LayerParams<double> make_layer(const std::string& variant, std::size_t d, std::size_t heads, std::uint64_t seed) {
  const LayerVariant v = LayerVariant::named(variant);
  Rng rng = Rng::stream(seed, "layer-test");
  return LayerParams<double>::init(LayerConfig{AttentionConfig{d, heads, v.attention}, 2 * d, v, 0.0}, rng);
}

Tensor<double> random_states(std::size_t b, std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "states");
  Tensor<double> h(Shape{b, n, d});
  for (auto& v : h.data_mut()) v = rng.uniform(-1, 1);
  return h;
}

}  // namespace

TEST(LayerVariant, NamesRoundTrip) {
  for (const auto& n : kVariants) EXPECT_EQ(LayerVariant::named(n).name(), n);
  EXPECT_THROW(LayerVariant::named("transformer"), std::invalid_argument);
}

TEST(CopyGate, ClosedGateIsBitwisePassthrough) {
  for (const std::string v : {"rel_gate", "absrel_gate", "ndr"}) {
    auto p = make_layer(v, 8, 2, 1);
    for (auto& b : p.gate->b2.data_mut()) b = -std::numeric_limits<double>::infinity();
    const auto h = random_states(2, 5, 8, 2);
    StepContext ctx;
    const auto out = layer_step(h, p, AttentionMask::full(2, 5), ctx);
    for (std::size_t k = 0; k < h.numel(); ++k) ASSERT_EQ(out[k], h[k]) << v << " at " << k;
  }
}

TEST(CopyGate, ClosedGateIsBitwisePassthroughInFloat) {
  const LayerVariant v = LayerVariant::named("ndr");
  Rng rng = Rng::stream(3, "float-layer");
  auto p = LayerParams<float>::init(LayerConfig{AttentionConfig{16, 2, v.attention}, 32, v, 0.0}, rng);
  for (auto& b : p.gate->b2.data_mut()) b = -std::numeric_limits<float>::infinity();
  Tensor<float> h(Shape{1, 6, 16});
  for (auto& x : h.data_mut()) x = static_cast<float>(rng.uniform(-2, 2));
  StepContext ctx;
  const auto out = layer_step(h, p, AttentionMask::full(1, 6), ctx);
  for (std::size_t k = 0; k < h.numel(); ++k) ASSERT_EQ(out[k], h[k]);
}

TEST(CopyGate, FreshInitMeanGateNearSigmoidMinusThree) {
  const double expected = 1.0 / (1.0 + std::exp(3.0));
  EXPECT_NEAR(expected, 0.0474, 1e-4);
  for (const std::string v : {"rel_gate", "absrel_gate", "ndr"}) {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.n_classes = 8;
    cfg.d_model = 64;
    cfg.d_ff = 128;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.variant = v;
    EncoderModel<float> model(cfg, Rng::stream(4, "gate-init"));
    Rng rng = Rng::stream(5, "gate-ids");
    std::vector<std::vector<int>> seqs(32);
    for (auto& s : seqs)
      for (int k = 0; k < 10; ++k) s.push_back(1 + static_cast<int>(rng.below(19)));
    StepContext ctx;
    const auto res = model.forward(make_batch(seqs, {}), 1, ctx, true);
    double mean = 0;
    for (float g : res.trace.front().gate.data()) mean += g;
    mean /= static_cast<double>(res.trace.front().gate.numel());
    EXPECT_NEAR(mean, expected, 0.02) << v;
  }
}

TEST(CopyGate, PaddedColumnsStayUnchanged) {
  auto p = make_layer("ndr", 8, 2, 6);
  const auto h = random_states(2, 5, 8, 7);
  StepContext ctx;
  const auto out = layer_step(h, p, AttentionMask::from_lengths({5, 2}, 5), ctx);
  for (std::size_t i = 2; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out[(5 + i) * 8 + c], h[(5 + i) * 8 + c]);
}

TEST(GatedStep, MatchesComposedFormula) {
  for (const std::string v : {"rel_gate", "ndr"}) {
    const auto p = make_layer(v, 8, 2, 8);
    const auto h = random_states(1, 4, 8, 9);
    const auto mask = AttentionMask::full(1, 4);
    StepContext ctx;
    const auto att = attend(h, p.attn, mask, ctx);
    std::vector<double> a(h.numel()), out(h.numel());
    // a = LN(att + h) per column
    for (std::size_t i = 0; i < 4; ++i) {
      double m = 0, var = 0;
      for (std::size_t c = 0; c < 8; ++c) m += att.out[i * 8 + c] + h[i * 8 + c];
      m /= 8;
      for (std::size_t c = 0; c < 8; ++c) var += std::pow(att.out[i * 8 + c] + h[i * 8 + c] - m, 2);
      var /= 8;
      for (std::size_t c = 0; c < 8; ++c) a[i * 8 + c] = (att.out[i * 8 + c] + h[i * 8 + c] - m) / std::sqrt(var + 1e-5);
    }
    auto ffn = [](const FeedForwardParams<double>& f, const double* x, std::size_t din) {
      const std::size_t dh = f.w1.size(0), dout = f.w2.size(0);
      std::vector<double> hid(dh), y(dout);
      for (std::size_t o = 0; o < dh; ++o) {
        double s = f.b1[o];
        for (std::size_t k = 0; k < din; ++k) s += f.w1[o * din + k] * x[k];
        hid[o] = std::max(s, 0.0);
      }
      for (std::size_t o = 0; o < dout; ++o) {
        double s = f.b2[o];
        for (std::size_t k = 0; k < dh; ++k) s += f.w2[o * dh + k] * hid[k];
        y[o] = s;
      }
      return y;
    };
    for (std::size_t i = 0; i < 4; ++i) {
      auto u = ffn(p.ffn, &a[i * 8], 8);
      if (p.config.variant.norm == PostNorm::tanh) {
        for (auto& x : u) x = std::tanh(x);
      } else {
        double m = 0, var = 0;
        for (double x : u) m += x;
        m /= 8;
        for (double x : u) var += (x - m) * (x - m);
        var /= 8;
        for (auto& x : u) x = (x - m) / std::sqrt(var + 1e-5);
      }
      const auto z = ffn(*p.gate, &a[i * 8], 8);
      for (std::size_t c = 0; c < 8; ++c) {
        const double g = 1 / (1 + std::exp(-z[c]));
        out[i * 8 + c] = g * u[c] + (1 - g) * h[i * 8 + c];
      }
    }
    const auto got = layer_step(h, p, mask, ctx);
    for (std::size_t k = 0; k < out.size(); ++k) EXPECT_NEAR(got[k], out[k], 1e-10) << v;
  }
}

TEST(LayerStep, ShapesPreservedForEveryVariant) {
  for (const auto& v : kVariants) {
    const auto p = make_layer(v, 8, 2, 10);
    const auto h = random_states(3, 6, 8, 11);
    StepContext ctx;
    StepTrace<double> trace;
    const auto out = layer_step(h, p, AttentionMask::from_lengths({6, 4, 1}, 6), ctx, &trace);
    EXPECT_EQ(out.shape(), h.shape()) << v;
    EXPECT_EQ(trace.attention.shape(), (Shape{3, 2, 6, 6})) << v;
    EXPECT_EQ(trace.gate.defined(), LayerVariant::named(v).gated) << v;
    for (double x : out.data()) EXPECT_TRUE(std::isfinite(x)) << v;
  }
}

TEST(LayerStep, ParameterNamesAreUnique) {
  for (const auto& v : kVariants) {
    std::vector<Parameter<double>> ps;
    make_layer(v, 8, 2, 12).collect("layer.", ps);
    EXPECT_NO_THROW(check_unique_names(std::span<const Parameter<double>>(ps))) << v;
  }
}

class LayerGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(LayerGradients, MatchFiniteDifferences) {
  const auto r = layer_grad_check(GetParam());
  EXPECT_LT(r.max_rel_error, 1e-3) << "worst " << r.worst << " analytic " << r.worst_analytic << " numeric "
                                   << r.worst_numeric;
  EXPECT_GT(r.coordinates, 100u);
}

TEST_P(LayerGradients, MatchFiniteDifferencesWithActA) {
  EXPECT_LT(layer_grad_check(GetParam(), ActVariant::A).max_rel_error, 1e-3);
}

TEST_P(LayerGradients, MatchFiniteDifferencesWithActU) {
  EXPECT_LT(layer_grad_check(GetParam(), ActVariant::U).max_rel_error, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(AllVariants, LayerGradients, ::testing::ValuesIn(kVariants));
