#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/act.hpp"
#include "ndr/layer.hpp"

namespace ndr {

enum class Readout { last, first };

inline std::string to_string(Readout r) { return r == Readout::last ? "last" : "first"; }

inline Readout readout_from_string(const std::string& s) {
  if (s == "last") return Readout::last;
  if (s == "first") return Readout::first;
  throw std::invalid_argument("unknown readout: " + s);
}

/// Suggested step count: deepest dependency path times steps per operation, plus slack.
inline std::size_t depth_heuristic(std::size_t max_graph_depth, std::size_t steps_per_op, std::size_t extra) {
  if (steps_per_op < 1) throw std::invalid_argument("depth_heuristic: steps_per_op must be >= 1");
  return max_graph_depth * steps_per_op + extra;
}

struct ModelConfig {
  std::size_t vocab_size = 0;  // input tokens, id 0 reserved for padding
  std::size_t n_classes = 0;
  std::size_t d_model = 128;
  std::size_t d_ff = 256;
  std::size_t n_heads = 4;
  std::size_t n_layers = 6;
  std::size_t test_steps = 0;  // 0 means n_layers
  std::string variant = "ndr";
  Readout readout = Readout::last;
  std::optional<ActConfig> act;  // t_max follows the step count in use
  double dropout = 0.1;
  double attn_dropout = 0.1;

  LayerVariant layer_variant() const { return LayerVariant::named(variant); }
  std::size_t eval_steps() const { return test_steps == 0 ? n_layers : test_steps; }

  LayerConfig layer_config() const {
    LayerConfig lc;
    lc.attention = AttentionConfig{d_model, n_heads, layer_variant().attention, attn_dropout, attn_dropout};
    lc.d_ff = d_ff;
    lc.variant = layer_variant();
    lc.ffn_dropout = dropout;
    return lc;
  }

  void validate() const {
    if (vocab_size < 2 || n_classes < 1) throw std::invalid_argument("model: vocab and class counts must be set");
    if (d_ff == 0 || n_layers == 0) throw std::invalid_argument("model: d_ff and n_layers must be positive");
    if (test_steps != 0 && test_steps < n_layers) throw std::invalid_argument("model: test_steps must be >= n_layers");
    if (dropout < 0 || dropout >= 1 || attn_dropout < 0 || attn_dropout >= 1)
      throw std::invalid_argument("model: dropout rates must lie in [0,1)");
    layer_variant();
    layer_config().attention.validate();
    if (act) {
      ActConfig probe = *act;
      probe.t_max = n_layers;
      probe.validate();
    }
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv{
        {"vocab_size", std::to_string(vocab_size)}, {"n_classes", std::to_string(n_classes)},
        {"d_model", std::to_string(d_model)},       {"d_ff", std::to_string(d_ff)},
        {"n_heads", std::to_string(n_heads)},       {"n_layers", std::to_string(n_layers)},
        {"test_steps", std::to_string(test_steps)}, {"variant", variant},
        {"readout", to_string(readout)},            {"dropout", format_real(dropout)},
        {"attn_dropout", format_real(attn_dropout)}, {"act", act ? to_string(act->variant) : "none"}};
    if (act) {
      kv["act_epsilon"] = format_real(act->epsilon);
      kv["act_weight"] = format_real(act->reg_weight);
    }
    return kv;
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    auto get = [&kv](const std::string& k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw std::invalid_argument("model config: missing key " + k);
      return it->second;
    };
    ModelConfig c;
    c.vocab_size = std::stoul(get("vocab_size"));
    c.n_classes = std::stoul(get("n_classes"));
    c.d_model = std::stoul(get("d_model"));
    c.d_ff = std::stoul(get("d_ff"));
    c.n_heads = std::stoul(get("n_heads"));
    c.n_layers = std::stoul(get("n_layers"));
    c.test_steps = std::stoul(get("test_steps"));
    c.variant = get("variant");
    c.readout = readout_from_string(get("readout"));
    c.dropout = std::stod(get("dropout"));
    c.attn_dropout = std::stod(get("attn_dropout"));
    if (get("act") != "none") {
      ActConfig a;
      a.variant = act_variant_from_string(get("act"));
      a.epsilon = std::stod(get("act_epsilon"));
      a.reg_weight = std::stod(get("act_weight"));
      c.act = a;
    }
    return c;
  }

  /// Shortest decimal text that parses back to the same double.
  static std::string format_real(double v) {
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
      std::snprintf(buf, sizeof buf, "%.*g", prec, v);
      if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
  }
};

/// A padded batch of already wrapped (B ... E) token id sequences.
struct Batch {
  std::size_t size = 0;
  std::size_t length = 0;
  std::vector<int> ids;              // size * length, padding id 0
  std::vector<std::size_t> lengths;  // valid prefix length per row
  std::vector<int> targets;

  AttentionMask mask() const { return AttentionMask::from_lengths(lengths, length); }
};

inline Batch make_batch(const std::vector<std::vector<int>>& seqs, const std::vector<int>& targets) {
  if (seqs.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (!targets.empty() && targets.size() != seqs.size()) throw std::invalid_argument("make_batch: target count");
  Batch b;
  b.size = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("make_batch: empty sequence");
    b.length = std::max(b.length, s.size());
  }
  b.ids.assign(b.size * b.length, 0);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    std::copy(seqs[r].begin(), seqs[r].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.length));
    b.lengths.push_back(seqs[r].size());
  }
  b.targets = targets;
  return b;
}

template <class T>
struct ForwardResult {
  Tensor<T> logits;                       // [B, classes]
  std::optional<Tensor<T>> act_loss;      // scalar, when ACT is enabled
  std::vector<std::size_t> ponder_steps;  // [B * N] readout steps, ACT only
  std::size_t steps_run = 0;
  std::vector<StepTrace<T>> trace;  // per step, when requested
};

template <class T>
class EncoderModel {
 public:
  EncoderModel() = default;

  EncoderModel(const ModelConfig& cfg, Rng rng) : cfg_(cfg) {
    cfg_.validate();
    Rng emb_rng = rng.split("embedding"), layer_rng = rng.split("layer"), out_rng = rng.split("readout");
    embedding_ = uniform_weight<T>(cfg.vocab_size, cfg.d_model, emb_rng);
    layer_ = LayerParams<T>::init(cfg_.layer_config(), layer_rng);
    if (cfg.act) {
      Rng halt_rng = rng.split("halting");
      halting_ = HaltingParams<T>::init(cfg.d_model, halt_rng);
    }
    out_w_ = uniform_weight<T>(cfg.n_classes, cfg.d_model, out_rng);
    out_b_ = filled<T>({cfg.n_classes}, 0);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  const LayerParams<T>& layer() const { return layer_; }
  LayerParams<T>& layer() { return layer_; }
  const std::optional<HaltingParams<T>>& halting() const { return halting_; }

  std::vector<Parameter<T>> parameters() const {
    std::vector<Parameter<T>> out;
    push_param(out, "embedding", embedding_, true);
    layer_.collect("layer.", out);
    if (halting_) halting_->collect("halting.", out);
    push_param(out, "readout.w", out_w_, true);
    push_param(out, "readout.b", out_b_, false);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Initial column states [B, N, d].
  Tensor<T> embed(const Batch& batch) const {
    Tensor<T> x = embedding(embedding_, batch.ids, Shape{batch.size, batch.length});
    if (cfg_.layer_variant().attention == AttentionKind::standard_abs) {
      std::vector<double> pos(batch.length);
      for (std::size_t j = 0; j < batch.length; ++j) pos[j] = static_cast<double>(j);
      const Tensor<T> table = reshape(sinusoid_table<T>(pos, cfg_.d_model), Shape{1, batch.length, cfg_.d_model});
      x = add(scale(x, static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model)))), table);
    }
    return x;
  }

  /// Runs `steps` shared steps (ACT: at most `steps`) and projects the readout column.
  ForwardResult<T> forward(const Batch& batch, std::size_t steps, StepContext& ctx, bool trace = false) const {
    if (batch.size == 0 || batch.length == 0) throw std::invalid_argument("forward: empty batch");
    for (auto len : batch.lengths)
      if (len == 0) throw std::invalid_argument("forward: empty sequence");
    if (steps < 1) throw std::invalid_argument("forward: need at least one step");
    const AttentionMask mask = batch.mask();
    ForwardResult<T> res;
    Tensor<T> h = embed(batch);

    std::optional<ActReadout<T>> act;
    if (cfg_.act) {
      ActConfig ac = *cfg_.act;
      ac.t_max = steps;
      act.emplace(ac, mask, cfg_.d_model);
    }
    for (std::size_t t = 0; t < steps; ++t) {
      StepTrace<T> st;
      h = layer_step(h, layer_, mask, ctx, trace ? &st : nullptr);
      if (trace) res.trace.push_back(std::move(st));
      ++res.steps_run;
      if (act) {
        act->observe(h, act_halting(h, *halting_));
        if (act->done()) break;
      }
    }
    if (act) {
      h = act->output();
      res.act_loss = act->loss();
      res.ponder_steps = act->ponder_steps();
    }

    std::vector<std::size_t> idx(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b) idx[b] = cfg_.readout == Readout::last ? batch.lengths[b] - 1 : 0;
    res.logits = linear(select_rows(h, idx), out_w_, out_b_);
    return res;
  }

  /// Mean cross-entropy at the readout column plus the ACT regularizer.
  Tensor<T> loss(const ForwardResult<T>& res, std::span<const int> targets) const {
    Tensor<T> l = cross_entropy(res.logits, targets);
    if (res.act_loss) l = add(l, *res.act_loss);
    return l;
  }

 private:
  ModelConfig cfg_;
  Tensor<T> embedding_;
  LayerParams<T> layer_;
  std::optional<HaltingParams<T>> halting_;
  Tensor<T> out_w_, out_b_;
};

inline std::vector<std::size_t> argmax_rows(const Tensor<float>& logits) {
  const std::size_t B = logits.size(0), C = logits.size(1);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[b * C + c] > logits[b * C + best]) best = c;
    out[b] = best;
  }
  return out;
}

}  // namespace ndr
