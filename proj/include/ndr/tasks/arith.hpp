#pragma once

// Nested modulo-10 additions and multiplications, every binary operation in
// its own brackets: ((4*7)+2) = 0. Depth counts operations, not leaves.

#include <algorithm>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/rng.hpp"
#include "ndr/tasks/sample.hpp"

namespace ndr::tasks {

struct ArithNode {
  char op = 0;  // '+', '*', or 0 for a digit leaf
  int digit = 0;
  std::unique_ptr<ArithNode> lhs, rhs;

  int depth() const { return op ? 1 + std::max(lhs->depth(), rhs->depth()) : 0; }

  int value() const {
    if (!op) return digit;
    return op == '+' ? (lhs->value() + rhs->value()) % 10 : (lhs->value() * rhs->value()) % 10;
  }

  void emit(std::vector<std::string>& out) const {
    if (!op) {
      out.emplace_back(1, static_cast<char>('0' + digit));
      return;
    }
    out.emplace_back("(");
    lhs->emit(out);
    out.emplace_back(1, op);
    rhs->emit(out);
    out.emplace_back(")");
  }
};

class ArithParseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::unique_ptr<ArithNode> arith_parse_at(const std::vector<std::string>& t, std::size_t& pos) {
  if (pos >= t.size()) throw ArithParseError("arith: unexpected end of expression");
  auto node = std::make_unique<ArithNode>();
  const std::string& tok = t[pos++];
  if (tok.size() == 1 && tok[0] >= '0' && tok[0] <= '9') {
    node->digit = tok[0] - '0';
    return node;
  }
  if (tok != "(") throw ArithParseError("arith: unexpected token '" + tok + "'");
  node->lhs = arith_parse_at(t, pos);
  if (pos >= t.size() || (t[pos] != "+" && t[pos] != "*")) throw ArithParseError("arith: expected operator");
  node->op = t[pos++][0];
  node->rhs = arith_parse_at(t, pos);
  if (pos >= t.size() || t[pos] != ")") throw ArithParseError("arith: expected ')'");
  ++pos;
  return node;
}

}  // namespace detail

inline std::unique_ptr<ArithNode> arith_parse(const std::vector<std::string>& tokens) {
  std::size_t pos = 0;
  auto root = detail::arith_parse_at(tokens, pos);
  if (pos != tokens.size()) throw ArithParseError("arith: trailing tokens");
  return root;
}

/// Splits "((4*7)+2)" into single-character tokens (spaces ignored).
inline std::vector<std::string> arith_tokenize(const std::string& text) {
  std::vector<std::string> out;
  for (char c : text)
    if (c != ' ') out.emplace_back(1, c);
  return out;
}

inline int arith_eval(const std::vector<std::string>& tokens) { return arith_parse(tokens)->value(); }

inline constexpr double kArithSubOpProb = 0.2;

namespace detail {

/// Expression of exactly `depth` operations along a random spine; the other
/// operand of each operation is a shallower sub-operation with probability
/// kArithSubOpProb, else a digit.
inline std::unique_ptr<ArithNode> arith_build(int depth, Rng& rng) {
  auto node = std::make_unique<ArithNode>();
  if (depth == 0) {
    node->digit = static_cast<int>(rng.below(10));
    return node;
  }
  node->op = rng.bernoulli(0.5) ? '+' : '*';
  auto spine = arith_build(depth - 1, rng);
  std::unique_ptr<ArithNode> other;
  if (depth > 1 && rng.bernoulli(kArithSubOpProb))
    other = arith_build(rng.range(1, depth - 1), rng);
  else
    other = arith_build(0, rng);
  if (rng.bernoulli(0.5)) {
    node->lhs = std::move(spine);
    node->rhs = std::move(other);
  } else {
    node->lhs = std::move(other);
    node->rhs = std::move(spine);
  }
  return node;
}

}  // namespace detail

/// Rejection-samples an expression of the given depth and at most kMaxTokens tokens.
inline Sample arith_sample(int depth, Rng& rng) {
  for (;;) {
    auto root = detail::arith_build(depth, rng);
    Sample s;
    root->emit(s.tokens);
    if (s.tokens.size() > kMaxTokens) continue;
    s.depth = root->depth();
    s.target = std::to_string(root->value());
    return s;
  }
}

}  // namespace ndr::tasks
