#pragma once

// Gradient checks of every composite the models use, evaluated in extended
// precision. Shared by the test suite and the `grad-check` CLI command.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ndr/grad_check.hpp"
#include "ndr/model.hpp"

namespace ndr {

using CheckReal = long double;

/// relu/matmul composite on random 4x5 inputs.
inline GradCheckResult ops_grad_check(std::uint64_t seed = 7, double step = 1e-5) {
  Rng rng = Rng::stream(seed, "grad-check/ops");
  auto rand = [&rng](Shape s) {
    Tensor<CheckReal> t(std::move(s));
    for (auto& x : t.data_mut()) x = static_cast<CheckReal>(rng.uniform(-1, 1));
    return t;
  };
  std::vector<Parameter<CheckReal>> in{{"x", rand({4, 5}), false}, {"w1", rand({5, 6}), true}, {"w2", rand({6, 3}), true}};
  const Tensor<CheckReal> r = rand({4, 3});
  return grad_check(
      [&] { return sum(mul(matmul(relu(matmul(in[0].tensor, in[1].tensor)), in[2].tensor), r)); }, in, step);
}

/// Geometric attention weights with respect to their score logits, one padded source.
inline GradCheckResult geometric_grad_check(std::uint64_t seed = 7, double step = 1e-5) {
  Rng rng = Rng::stream(seed, "grad-check/geometric");
  const std::size_t B = 2, H = 2, N = 5;
  Tensor<CheckReal> z(Shape{B, H, N, N}), r(Shape{B, H, N, N});
  for (auto& x : z.data_mut()) x = static_cast<CheckReal>(rng.uniform(-3, 3));
  for (auto& x : r.data_mut()) x = static_cast<CheckReal>(rng.uniform(-1, 1));
  std::vector<std::uint8_t> pad(B * N, 0);
  pad[B * N - 1] = 1;
  std::vector<Parameter<CheckReal>> in{{"logits", z, false}};
  return grad_check([&] { return sum(mul(geometric_weights_from_logits(in[0].tensor, pad), r)); }, in, step);
}

/// Shared step of `variant` applied `steps` times (optionally under ACT) at
/// d=8, 2 heads, N=4, one padded row. The objective is a random projection
/// of the final states (plus the ACT regularizer). Biases, gains and the
/// gate bias are moved off their init values so no gradient is degenerate.
inline GradCheckResult layer_grad_check(const std::string& variant, std::optional<ActVariant> act = std::nullopt,
                                        std::uint64_t seed = 7, double step = 1e-5) {
  const std::size_t B = 2, N = 4, d = 8, steps = 4;
  LayerConfig lc;
  lc.attention = AttentionConfig{d, 2, LayerVariant::named(variant).attention, 0.0, 0.0};
  lc.d_ff = 16;
  lc.variant = LayerVariant::named(variant);
  Rng rng = Rng::stream(seed, "grad-check/layer");
  LayerParams<CheckReal> layer = LayerParams<CheckReal>::init(lc, rng);

  std::vector<Parameter<CheckReal>> in;
  layer.collect("layer.", in);
  std::optional<HaltingParams<CheckReal>> halting;
  if (act) {
    halting = HaltingParams<CheckReal>::init(d, rng);
    halting->collect("halting.", in);
  }
  for (auto& p : in) {
    if (p.weight_decay_eligible) continue;
    for (auto& x : p.tensor.data_mut()) x += static_cast<CheckReal>(rng.uniform(-0.5, 0.5));
  }
  if (layer.gate)
    for (auto& x : layer.gate->b2.data_mut()) x = static_cast<CheckReal>(rng.uniform(-1, 1));
  // Halting units near 0.4 cross the threshold around step 3 of 4.
  if (halting) halting->b_h[0] = static_cast<CheckReal>(std::log(0.4 / 0.6));

  Tensor<CheckReal> h0(Shape{B, N, d}), r(Shape{B, N, d});
  for (auto& x : h0.data_mut()) x = static_cast<CheckReal>(rng.uniform(-1, 1));
  for (auto& x : r.data_mut()) x = static_cast<CheckReal>(rng.uniform(-1, 1));
  in.push_back({"input", h0, false});
  const AttentionMask mask = AttentionMask::from_lengths({N, N - 1}, N);

  auto objective = [&]() -> Tensor<CheckReal> {
    StepContext ctx;
    Tensor<CheckReal> h = h0;
    std::optional<ActReadout<CheckReal>> readout;
    if (act) readout.emplace(ActConfig{*act, steps, 0.01, 0.03}, mask, d);
    for (std::size_t t = 0; t < steps; ++t) {
      h = layer_step(h, layer, mask, ctx);
      if (readout) {
        readout->observe(h, act_halting(h, *halting));
        if (readout->done()) break;
      }
    }
    if (readout) return add(sum(mul(readout->output(), r)), readout->loss());
    return sum(mul(h, r));
  };
  return grad_check(objective, in, step);
}

/// Names accepted by `grad_check_module`.
inline std::vector<std::string> grad_check_modules() {
  return {"ops", "geometric", "baseline", "rel", "rel_gate", "absrel_gate", "geom", "ndr", "act_a", "act_u"};
}

/// Runs one named check, or every check for "all". ACT entries wrap each of
/// the six layer variants.
inline std::vector<std::pair<std::string, GradCheckResult>> grad_check_module(const std::string& name) {
  std::vector<std::pair<std::string, GradCheckResult>> out;
  const std::vector<std::string> layers{"baseline", "rel", "rel_gate", "absrel_gate", "geom", "ndr"};
  bool known = false;
  if (name == "ops" || name == "all") {
    out.emplace_back("ops", ops_grad_check());
    known = true;
  }
  if (name == "geometric" || name == "all") {
    out.emplace_back("geometric", geometric_grad_check());
    known = true;
  }
  for (const auto& v : layers)
    if (name == v || name == "all") {
      out.emplace_back(v, layer_grad_check(v));
      known = true;
    }
  for (auto [key, variant] : {std::pair{"act_a", ActVariant::A}, std::pair{"act_u", ActVariant::U}})
    if (name == key || name == "all") {
      for (const auto& v : layers) out.emplace_back(std::string(key) + "/" + v, layer_grad_check(v, variant));
      known = true;
    }
  if (!known) throw std::invalid_argument("grad-check: unknown module " + name);
  return out;
}

}  // namespace ndr
