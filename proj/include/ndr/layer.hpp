#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/attention.hpp"

namespace ndr {

enum class PostNorm { layernorm, tanh };

/// One row of the ablation grid: attention kind, copy gate, and the
/// normalizer applied to the feedforward output of a gated layer.
struct LayerVariant {
  AttentionKind attention = AttentionKind::standard_abs;
  bool gated = false;
  PostNorm norm = PostNorm::layernorm;

  /// baseline, rel, rel_gate, absrel_gate, geom, ndr
  static LayerVariant named(const std::string& name) {
    if (name == "baseline") return {AttentionKind::standard_abs, false, PostNorm::layernorm};
    if (name == "rel") return {AttentionKind::relative, false, PostNorm::layernorm};
    if (name == "rel_gate") return {AttentionKind::relative, true, PostNorm::tanh};
    if (name == "absrel_gate") return {AttentionKind::abs_rel_gated, true, PostNorm::tanh};
    if (name == "geom") return {AttentionKind::geometric, false, PostNorm::layernorm};
    if (name == "ndr") return {AttentionKind::geometric, true, PostNorm::layernorm};
    throw std::invalid_argument("unknown layer variant: " + name);
  }

  std::string name() const {
    for (const char* n : {"baseline", "rel", "rel_gate", "absrel_gate", "geom", "ndr"})
      if (named(n) == *this) return n;
    return to_string(attention) + (gated ? "+gate" : "") + (norm == PostNorm::tanh ? "+tanh" : "");
  }

  friend bool operator==(const LayerVariant&, const LayerVariant&) = default;
};

struct LayerConfig {
  AttentionConfig attention;
  std::size_t d_ff = 0;
  LayerVariant variant;
  double ffn_dropout = 0.0;
};

template <class T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;

  static FeedForwardParams init(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng, T out_bias = 0) {
    return {uniform_weight<T>(d_hidden, d_in, rng), filled<T>({d_hidden}, 0), uniform_weight<T>(d_out, d_hidden, rng),
            filled<T>({d_out}, out_bias)};
  }

  /// W2 max(W1 x + b1, 0) + b2, with dropout on the hidden activations.
  Tensor<T> apply(const Tensor<T>& x, double hidden_dropout, StepContext& ctx) const {
    Tensor<T> hidden = relu(linear(x, w1, b1));
    if (ctx.train) hidden = dropout(hidden, hidden_dropout, ctx.dropout_rng(), true);
    return linear(hidden, w2, b2);
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    push_param(out, prefix + "w1", w1, true);
    push_param(out, prefix + "b1", b1, false);
    push_param(out, prefix + "w2", w2, true);
    push_param(out, prefix + "b2", b2, false);
  }
};

/// Shared parameters of one encoder step. The gate feedforward exists only
/// for gated variants and the second norm only where it is used.
template <class T>
struct LayerParams {
  LayerConfig config;
  AttentionParams<T> attn;
  Tensor<T> ln1_gain, ln1_bias;
  FeedForwardParams<T> ffn;
  std::optional<FeedForwardParams<T>> gate;
  std::optional<Tensor<T>> ln2_gain, ln2_bias;

  static constexpr double kGateBiasInit = -3.0;

  static LayerParams init(const LayerConfig& cfg, Rng& rng) {
    if (cfg.attention.kind != cfg.variant.attention) throw std::invalid_argument("layer: attention kind mismatch");
    LayerParams p;
    p.config = cfg;
    const std::size_t d = cfg.attention.d_model;
    p.attn = AttentionParams<T>::init(cfg.attention, rng);
    p.ln1_gain = filled<T>({d}, 1);
    p.ln1_bias = filled<T>({d}, 0);
    p.ffn = FeedForwardParams<T>::init(d, cfg.d_ff, d, rng);
    if (cfg.variant.gated) p.gate = FeedForwardParams<T>::init(d, d, d, rng, static_cast<T>(kGateBiasInit));
    if (!cfg.variant.gated || cfg.variant.norm == PostNorm::layernorm) {
      p.ln2_gain = filled<T>({d}, 1);
      p.ln2_bias = filled<T>({d}, 0);
    }
    return p;
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    attn.collect(prefix + "attn.", out);
    push_param(out, prefix + "ln1.gain", ln1_gain, false);
    push_param(out, prefix + "ln1.bias", ln1_bias, false);
    ffn.collect(prefix + "ffn_data.", out);
    if (gate) gate->collect(prefix + "ffn_gate.", out);
    if (ln2_gain) {
      push_param(out, prefix + "ln2.gain", *ln2_gain, false);
      push_param(out, prefix + "ln2.bias", *ln2_bias, false);
    }
  }
};

/// What a traced step exposes: attention weights [B,H,N,N] and, for gated
/// layers, the gate activations [B,N,d].
template <class T>
struct StepTrace {
  Tensor<T> attention;
  Tensor<T> gate;
};

/// a = LN(MHA(h) + h); u = Norm(FFN_data(a)); g = sigmoid(FFN_gate(a));
/// out = g * u + (1 - g) * h. No residual around FFN_data. Padded columns
/// have their gate forced shut.
template <class T>
Tensor<T> gated_step(const Tensor<T>& h, const LayerParams<T>& p, const AttentionMask& mask, StepContext& ctx,
                     StepTrace<T>* trace = nullptr) {
  if (!p.gate) throw std::logic_error("gated_step on a layer without gate parameters");
  const AttentionOutput<T> att = attend(h, p.attn, mask, ctx);
  const Tensor<T> a = layer_norm(add(att.out, h), p.ln1_gain, p.ln1_bias);
  const Tensor<T> f = p.ffn.apply(a, p.config.ffn_dropout, ctx);
  const Tensor<T> u = p.config.variant.norm == PostNorm::layernorm ? layer_norm(f, *p.ln2_gain, *p.ln2_bias) : tanh(f);
  Tensor<T> g = sigmoid(p.gate->apply(a, 0.0, ctx));
  if (mask.any_padding()) g = mul(g, mask.valid_columns<T>());
  if (trace) {
    trace->attention = att.weights.detach();
    trace->gate = g.detach();
  }
  return copy_gate(g, u, h);
}

/// Post-norm encoder layer: a = LN(MHA(h) + h); out = LN(FFN(a) + a).
template <class T>
Tensor<T> ungated_step(const Tensor<T>& h, const LayerParams<T>& p, const AttentionMask& mask, StepContext& ctx,
                       StepTrace<T>* trace = nullptr) {
  const AttentionOutput<T> att = attend(h, p.attn, mask, ctx);
  const Tensor<T> a = layer_norm(add(att.out, h), p.ln1_gain, p.ln1_bias);
  const Tensor<T> f = p.ffn.apply(a, p.config.ffn_dropout, ctx);
  if (trace) trace->attention = att.weights.detach();
  return layer_norm(add(f, a), *p.ln2_gain, *p.ln2_bias);
}

template <class T>
Tensor<T> layer_step(const Tensor<T>& h, const LayerParams<T>& p, const AttentionMask& mask, StepContext& ctx,
                     StepTrace<T>* trace = nullptr) {
  return p.config.variant.gated ? gated_step(h, p, mask, ctx, trace) : ungated_step(h, p, mask, ctx, trace);
}

}  // namespace ndr
