#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/geometric.hpp"
#include "ndr/init.hpp"
#include "ndr/ops.hpp"

namespace ndr {

enum class AttentionKind { standard_abs, relative, abs_rel_gated, geometric };

inline std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::standard_abs: return "standard_abs";
    case AttentionKind::relative: return "relative";
    case AttentionKind::abs_rel_gated: return "abs_rel_gated";
    case AttentionKind::geometric: return "geometric";
  }
  return "?";
}

inline AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "standard_abs") return AttentionKind::standard_abs;
  if (s == "relative") return AttentionKind::relative;
  if (s == "abs_rel_gated") return AttentionKind::abs_rel_gated;
  if (s == "geometric") return AttentionKind::geometric;
  throw std::invalid_argument("unknown attention kind: " + s);
}

struct AttentionConfig {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  AttentionKind kind = AttentionKind::standard_abs;
  double content_dropout = 0.0;
  double position_dropout = 0.0;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw std::invalid_argument("attention: d_model must be a positive multiple of n_heads");
  }
};

/// Per-position validity of a padded batch.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> valid;  // batch * length

  static AttentionMask full(std::size_t batch, std::size_t length) {
    return AttentionMask{batch, length, std::vector<std::uint8_t>(batch * length, 1)};
  }

  static AttentionMask from_lengths(const std::vector<std::size_t>& lengths, std::size_t length) {
    AttentionMask m{lengths.size(), length, std::vector<std::uint8_t>(lengths.size() * length, 0)};
    for (std::size_t b = 0; b < lengths.size(); ++b) {
      if (lengths[b] > length) throw std::invalid_argument("mask: sequence longer than padded length");
      for (std::size_t j = 0; j < lengths[b]; ++j) m.valid[b * length + j] = 1;
    }
    return m;
  }

  bool is_valid(std::size_t b, std::size_t j) const { return valid[b * length + j] != 0; }

  bool any_padding() const {
    for (auto v : valid)
      if (!v) return true;
    return false;
  }

  std::vector<std::uint8_t> pad_flags() const {
    std::vector<std::uint8_t> pad(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i) pad[i] = valid[i] ? 0 : 1;
    return pad;
  }

  /// [B, 1, 1, N] with 1 at padded sources.
  template <class T>
  Tensor<T> pad_keys() const {
    Tensor<T> t(Shape{batch, 1, 1, length});
    for (std::size_t i = 0; i < valid.size(); ++i) t[i] = valid[i] ? T{0} : T{1};
    return t;
  }

  /// [B, N, 1] with 1 at valid columns.
  template <class T>
  Tensor<T> valid_columns() const {
    Tensor<T> t(Shape{batch, length, 1});
    for (std::size_t i = 0; i < valid.size(); ++i) t[i] = valid[i] ? T{1} : T{0};
    return t;
  }

  void check(std::size_t b, std::size_t n) const {
    if (b != batch || n != length) throw ShapeError("attention mask does not match the batch");
    for (std::size_t i = 0; i < batch; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < length; ++j) any = any || is_valid(i, j);
      if (!any) throw std::invalid_argument("attention: every source is masked for sequence " + std::to_string(i));
    }
  }
};

/// Training-mode flag and the dropout stream for one forward pass.
struct StepContext {
  bool train = false;
  Rng* rng = nullptr;

  Rng& dropout_rng() {
    if (!rng) throw std::logic_error("training forward pass needs a dropout stream");
    return *rng;
  }
};

template <class T>
struct ValueOutputParams {
  Tensor<T> w_v, b_v, w_o, b_o;
};

// No key bias: it shifts every score of a row equally and cancels in the softmax.
template <class T>
struct MhaParams {
  Tensor<T> w_q, b_q, w_k;
};

/// Content/position key and query maps for relative attention.
template <class T>
struct RelPosParams {
  Tensor<T> w_q, w_ke, w_kp, b_qe, b_qp;
};

/// Scalar gate choosing between relative and absolute position keys.
template <class T>
struct AbsRelGateParams {
  Tensor<T> w_ar, b_ar;
};

/// Query/key maps plus per-head directional rows and (alpha, beta, gamma).
template <class T>
struct GeometricParams {
  Tensor<T> w_q, b_q, w_ke;
  Tensor<T> w_lr, b_lr, w_rl, b_rl;  // [H, d], [H]
  Tensor<T> alpha, beta, gamma;      // [H]
};

template <class T>
struct AttentionParams {
  AttentionConfig config;
  ValueOutputParams<T> vo;
  std::optional<MhaParams<T>> mha;
  std::optional<RelPosParams<T>> rel;
  std::optional<AbsRelGateParams<T>> absrel;
  std::optional<GeometricParams<T>> geo;

  static AttentionParams init(const AttentionConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.d_model, H = cfg.n_heads;
    AttentionParams p;
    p.config = cfg;
    switch (cfg.kind) {
      case AttentionKind::standard_abs:
        p.mha = MhaParams<T>{uniform_weight<T>(d, d, rng), filled<T>({d}, 0), uniform_weight<T>(d, d, rng)};
        break;
      case AttentionKind::abs_rel_gated:
        p.absrel = AbsRelGateParams<T>{uniform_weight<T>(1, d, rng), filled<T>({1}, 0)};
        [[fallthrough]];
      case AttentionKind::relative:
        p.rel = RelPosParams<T>{uniform_weight<T>(d, d, rng), uniform_weight<T>(d, d, rng),
                                uniform_weight<T>(d, d, rng), filled<T>({d}, 0), filled<T>({d}, 0)};
        break;
      case AttentionKind::geometric: {
        GeometricParams<T> g;
        g.w_q = uniform_weight<T>(d, d, rng);
        g.b_q = filled<T>({d}, 0);
        g.w_ke = uniform_weight<T>(d, d, rng);
        g.w_lr = uniform_weight<T>(H, d, rng);
        g.b_lr = filled<T>({H}, 0);
        g.w_rl = uniform_weight<T>(H, d, rng);
        g.b_rl = filled<T>({H}, 0);
        g.alpha = filled<T>({H}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_head()))));
        g.beta = filled<T>({H}, 1);
        g.gamma = filled<T>({H}, 0);
        p.geo = g;
        break;
      }
    }
    p.vo = ValueOutputParams<T>{uniform_weight<T>(d, d, rng), filled<T>({d}, 0), uniform_weight<T>(d, d, rng),
                                filled<T>({d}, 0)};
    return p;
  }

  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    if (mha) {
      push_param(out, prefix + "w_q", mha->w_q, true);
      push_param(out, prefix + "b_q", mha->b_q, false);
      push_param(out, prefix + "w_k", mha->w_k, true);
    }
    if (rel) {
      push_param(out, prefix + "w_q", rel->w_q, true);
      push_param(out, prefix + "w_ke", rel->w_ke, true);
      push_param(out, prefix + "w_kp", rel->w_kp, true);
      push_param(out, prefix + "b_qe", rel->b_qe, false);
      push_param(out, prefix + "b_qp", rel->b_qp, false);
    }
    if (absrel) {
      push_param(out, prefix + "w_ar", absrel->w_ar, true);
      push_param(out, prefix + "b_ar", absrel->b_ar, false);
    }
    if (geo) {
      push_param(out, prefix + "w_q", geo->w_q, true);
      push_param(out, prefix + "b_q", geo->b_q, false);
      push_param(out, prefix + "w_ke", geo->w_ke, true);
      push_param(out, prefix + "w_lr", geo->w_lr, true);
      push_param(out, prefix + "b_lr", geo->b_lr, false);
      push_param(out, prefix + "w_rl", geo->w_rl, true);
      push_param(out, prefix + "b_rl", geo->b_rl, false);
      push_param(out, prefix + "alpha", geo->alpha, false);
      push_param(out, prefix + "beta", geo->beta, false);
      push_param(out, prefix + "gamma", geo->gamma, false);
    }
    push_param(out, prefix + "w_v", vo.w_v, true);
    push_param(out, prefix + "b_v", vo.b_v, false);
    push_param(out, prefix + "w_o", vo.w_o, true);
    push_param(out, prefix + "b_o", vo.b_o, false);
  }
};

template <class T>
struct AttentionOutput {
  Tensor<T> out;      // [B, N, d]
  Tensor<T> weights;  // [B, H, N, N], rows normalized (softmax) or geometric A
};

namespace detail {

template <class T>
Tensor<T> project_values(const ValueOutputParams<T>& vo, const Tensor<T>& weights, const Tensor<T>& h,
                         std::size_t heads) {
  const Tensor<T> v = split_heads(linear(h, vo.w_v, vo.b_v), heads);
  return linear(merge_heads(matmul(weights, v)), vo.w_o, vo.b_o);
}

template <class T>
Tensor<T> per_head(const Tensor<T>& v, std::size_t heads, std::size_t dh) {
  return reshape(v, Shape{1, heads, 1, dh});
}

}  // namespace detail

/// Softmax multi-head attention; queries from each column, keys and values
/// from all valid columns.
template <class T>
AttentionOutput<T> mha_standard(const Tensor<T>& h, const AttentionParams<T>& p, const AttentionMask& mask,
                                StepContext& ctx) {
  const auto& cfg = p.config;
  const std::size_t H = cfg.n_heads, dh = cfg.d_head();
  if (h.dim() != 3 || h.size(2) != cfg.d_model) shape_fail("mha_standard", h.shape(), "need [B,N,d_model]");
  mask.check(h.size(0), h.size(1));
  Tensor<T> q = split_heads(linear(h, p.mha->w_q, p.mha->b_q), H);
  if (ctx.train) q = dropout(q, cfg.content_dropout, ctx.dropout_rng(), true);
  const Tensor<T> k = split_heads(linear(h, p.mha->w_k), H);
  Tensor<T> scores = scale(matmul(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  if (mask.any_padding()) scores = masked_fill(scores, mask.pad_keys<T>(), -std::numeric_limits<T>::infinity());
  Tensor<T> weights = softmax_last(scores);
  return {detail::project_values(p.vo, weights, h, H), weights};
}

enum class RelGateMode { relative_only, abs_rel_gated };

/// Transformer-XL style scores with an optional per-target gate r_i mixing
/// relative (p_{i-j}) and absolute (p_j) position keys. Padded sources are -inf.
template <class T>
Tensor<T> rel_scores(const Tensor<T>& h, const AttentionParams<T>& p, RelGateMode mode, const AttentionMask& mask,
                     StepContext& ctx) {
  const auto& cfg = p.config;
  if (!p.rel) throw std::logic_error("rel_scores: attention has no relative parameters");
  if (mode == RelGateMode::abs_rel_gated && !p.absrel) throw std::logic_error("rel_scores: missing gate parameters");
  if (h.dim() != 3 || h.size(2) != cfg.d_model) shape_fail("rel_scores", h.shape(), "need [B,N,d_model]");
  mask.check(h.size(0), h.size(1));
  const std::size_t B = h.size(0), N = h.size(1), H = cfg.n_heads, dh = cfg.d_head(), d = cfg.d_model;
  const auto& rp = *p.rel;

  const Tensor<T> q = split_heads(linear(h, rp.w_q), H);
  Tensor<T> q_content = add(q, detail::per_head(rp.b_qe, H, dh));
  Tensor<T> q_position = add(q, detail::per_head(rp.b_qp, H, dh));
  if (ctx.train) {
    q_content = dropout(q_content, cfg.content_dropout, ctx.dropout_rng(), true);
    q_position = dropout(q_position, cfg.position_dropout, ctx.dropout_rng(), true);
  }
  const Tensor<T> k_content = split_heads(linear(h, rp.w_ke), H);
  const Tensor<T> content = matmul(q_content, transpose_last2(k_content));

  std::vector<double> offsets(2 * N - 1);
  for (std::size_t m = 0; m < offsets.size(); ++m) offsets[m] = static_cast<double>(m) - static_cast<double>(N - 1);
  const Tensor<T> rel_keys =
      split_heads(reshape(linear(sinusoid_table<T>(offsets, d), rp.w_kp), Shape{1, 2 * N - 1, d}), H);
  Tensor<T> position = rel_gather(matmul(q_position, transpose_last2(rel_keys)));

  if (mode == RelGateMode::abs_rel_gated) {
    std::vector<double> absolute(N);
    for (std::size_t j = 0; j < N; ++j) absolute[j] = static_cast<double>(j);
    const Tensor<T> abs_keys = split_heads(reshape(linear(sinusoid_table<T>(absolute, d), rp.w_kp), Shape{1, N, d}), H);
    const Tensor<T> abs_scores = matmul(q_position, transpose_last2(abs_keys));
    const Tensor<T> r = reshape(sigmoid(linear(h, p.absrel->w_ar, p.absrel->b_ar)), Shape{B, 1, N, 1});
    position = add(mul(r, position), mul(rsub_scalar(T{1}, r), abs_scores));
  }
  Tensor<T> scores = scale(add(content, position), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  if (mask.any_padding()) scores = masked_fill(scores, mask.pad_keys<T>(), -std::numeric_limits<T>::infinity());
  return scores;
}

/// Per-gate values r_i = sigmoid(h_i W_ar + b_ar), shape [B, N, 1].
template <class T>
Tensor<T> abs_rel_gate(const Tensor<T>& h, const AttentionParams<T>& p) {
  return sigmoid(linear(h, p.absrel->w_ar, p.absrel->b_ar));
}

/// Score logits z = alpha * q_i . k_j + beta * D_ij + gamma, shape [B, H, N, N],
/// where D uses the left-to-right row when i <= j and the right-to-left row otherwise.
template <class T>
Tensor<T> geometric_logits(const Tensor<T>& h, const AttentionParams<T>& p, StepContext& ctx) {
  const auto& cfg = p.config;
  if (!p.geo) throw std::logic_error("geometric attention parameters missing");
  if (h.dim() != 3 || h.size(2) != cfg.d_model) shape_fail("geometric", h.shape(), "need [B,N,d_model]");
  const auto& g = *p.geo;
  const std::size_t B = h.size(0), N = h.size(1), H = cfg.n_heads;
  Tensor<T> q = split_heads(linear(h, g.w_q, g.b_q), H);
  if (ctx.train) q = dropout(q, cfg.content_dropout, ctx.dropout_rng(), true);
  const Tensor<T> k = split_heads(linear(h, g.w_ke), H);
  const Tensor<T> content = matmul(q, transpose_last2(k));

  const Tensor<T> left_to_right = swap_axes12(reshape(linear(h, g.w_lr, g.b_lr), Shape{B, N, H, 1}));
  const Tensor<T> right_to_left = swap_axes12(reshape(linear(h, g.w_rl, g.b_rl), Shape{B, N, H, 1}));
  Tensor<T> upper(Shape{N, N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i; j < N; ++j) upper[i * N + j] = T{1};
  const Tensor<T> direction = add(mul(left_to_right, upper), mul(right_to_left, rsub_scalar(T{1}, upper)));

  const Shape head{1, H, 1, 1};
  return add(add(mul(reshape(g.alpha, head), content), mul(reshape(g.beta, head), direction)), reshape(g.gamma, head));
}

/// Match probabilities P = sigmoid(z) with padded sources forced to 0.
template <class T>
Tensor<T> geometric_probs(const Tensor<T>& h, const AttentionParams<T>& p, const AttentionMask& mask,
                          StepContext& ctx) {
  mask.check(h.size(0), h.size(1));
  Tensor<T> probs = sigmoid(geometric_logits(h, p, ctx));
  if (mask.any_padding()) probs = masked_fill(probs, mask.pad_keys<T>(), T{0});
  return probs;
}

template <class T>
AttentionOutput<T> geometric_attend(const Tensor<T>& h, const AttentionParams<T>& p, const AttentionMask& mask,
                                    StepContext& ctx) {
  mask.check(h.size(0), h.size(1));
  const Tensor<T> weights = geometric_weights_from_logits(geometric_logits(h, p, ctx), mask.pad_flags());
  return {detail::project_values(p.vo, weights, h, p.config.n_heads), weights};
}

/// Dispatches on the configured attention kind.
template <class T>
AttentionOutput<T> attend(const Tensor<T>& h, const AttentionParams<T>& p, const AttentionMask& mask,
                          StepContext& ctx) {
  switch (p.config.kind) {
    case AttentionKind::standard_abs: return mha_standard(h, p, mask, ctx);
    case AttentionKind::relative:
    case AttentionKind::abs_rel_gated: {
      const auto mode =
          p.config.kind == AttentionKind::relative ? RelGateMode::relative_only : RelGateMode::abs_rel_gated;
      Tensor<T> weights = softmax_last(rel_scores(h, p, mode, mask, ctx));
      return {detail::project_values(p.vo, weights, h, p.config.n_heads), weights};
    }
    case AttentionKind::geometric: return geometric_attend(h, p, mask, ctx);
  }
  throw std::logic_error("unreachable attention kind");
}

}  // namespace ndr
