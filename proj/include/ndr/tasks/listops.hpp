#pragma once

// ListOps over digits with SM (sum mod 10), MIN, MAX and MED (floor of the
// median), written with separate bracket and operator tokens:
//   [ MED 4 8 5 [ MAX 8 4 9 ] ] -> 6

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/rng.hpp"
#include "ndr/tasks/sample.hpp"

namespace ndr::tasks {

enum class ListOp { digit, sm, min, max, med };

inline const std::vector<std::string>& listops_op_names() {
  static const std::vector<std::string> n{"SM", "MIN", "MAX", "MED"};
  return n;
}

struct ListOpsNode {
  ListOp op = ListOp::digit;
  int digit = 0;
  std::vector<ListOpsNode> args;

  static ListOpsNode leaf(int d) { return ListOpsNode{ListOp::digit, d, {}}; }

  int depth() const {
    int d = 0;
    for (const auto& a : args) d = std::max(d, a.depth());
    return op == ListOp::digit ? 0 : 1 + d;
  }

  void emit(std::vector<std::string>& out) const {
    if (op == ListOp::digit) {
      out.emplace_back(1, static_cast<char>('0' + digit));
      return;
    }
    out.emplace_back("[");
    out.push_back(listops_op_names()[static_cast<std::size_t>(op) - 1]);
    for (const auto& a : args) a.emit(out);
    out.emplace_back("]");
  }
};

struct ListOpsResult {
  int value = 0;
  int dep_depth = 0;
};

/// Value and dependency depth in one pass. MIN and MAX select one argument,
/// MED the one or two middle arguments, SM all of them; the dependency depth
/// is the depth of the tree restricted to selected branches. Among arguments
/// with equal value the shallowest (by dependency depth) is selected.
inline ListOpsResult listops_eval_node(const ListOpsNode& n) {
  if (n.op == ListOp::digit) return {n.digit, 0};
  if (n.args.empty()) throw std::invalid_argument("listops: operation without arguments");
  std::vector<ListOpsResult> r;
  r.reserve(n.args.size());
  for (const auto& a : n.args) r.push_back(listops_eval_node(a));

  std::vector<std::size_t> order(r.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&r](std::size_t a, std::size_t b) {
    return r[a].value != r[b].value ? r[a].value < r[b].value : r[a].dep_depth < r[b].dep_depth;
  });
  // First sorted position holding the same value as position k, i.e. the
  // shallowest argument with that value.
  auto group_start = [&](std::size_t k) {
    while (k > 0 && r[order[k - 1]].value == r[order[k]].value) --k;
    return k;
  };
  std::vector<std::size_t> selected;
  int value = 0;
  switch (n.op) {
    case ListOp::sm:
      for (std::size_t i = 0; i < r.size(); ++i) {
        value = (value + r[i].value) % 10;
        selected.push_back(i);
      }
      break;
    case ListOp::min:
      selected.push_back(order.front());
      value = r[order.front()].value;
      break;
    case ListOp::max:
      selected.push_back(order[group_start(order.size() - 1)]);
      value = r[selected.back()].value;
      break;
    case ListOp::med: {
      const std::size_t m = r.size();
      if (m % 2 == 1) {
        selected.push_back(order[group_start(m / 2)]);
        value = r[selected.back()].value;
      } else {
        const std::size_t lo = group_start(m / 2 - 1), hi = group_start(m / 2);
        selected.push_back(order[lo]);
        selected.push_back(order[hi == lo ? lo + 1 : hi]);
        value = (r[selected[0]].value + r[selected[1]].value) / 2;
      }
      break;
    }
    case ListOp::digit: break;
  }
  int dep = 0;
  for (auto i : selected) dep = std::max(dep, r[i].dep_depth);
  return {value, 1 + dep};
}

inline int listops_eval(const ListOpsNode& n) { return listops_eval_node(n).value; }
inline int dependency_depth(const ListOpsNode& n) { return listops_eval_node(n).dep_depth; }

class ListOpsParseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline ListOpsNode listops_parse_at(const std::vector<std::string>& t, std::size_t& pos) {
  if (pos >= t.size()) throw ListOpsParseError("listops: unexpected end");
  const std::string& tok = t[pos++];
  if (tok.size() == 1 && tok[0] >= '0' && tok[0] <= '9') return ListOpsNode::leaf(tok[0] - '0');
  if (tok != "[") throw ListOpsParseError("listops: unexpected token '" + tok + "'");
  if (pos >= t.size()) throw ListOpsParseError("listops: missing operator");
  const auto& names = listops_op_names();
  auto it = std::find(names.begin(), names.end(), t[pos]);
  if (it == names.end()) throw ListOpsParseError("listops: unknown operator '" + t[pos] + "'");
  ++pos;
  ListOpsNode n{static_cast<ListOp>(1 + (it - names.begin())), 0, {}};
  while (pos < t.size() && t[pos] != "]") n.args.push_back(listops_parse_at(t, pos));
  if (pos >= t.size()) throw ListOpsParseError("listops: missing ']'");
  ++pos;
  if (n.args.empty()) throw std::invalid_argument("listops: operation without arguments");
  return n;
}

}  // namespace detail

inline ListOpsNode listops_parse(const std::vector<std::string>& tokens) {
  std::size_t pos = 0;
  ListOpsNode n = detail::listops_parse_at(tokens, pos);
  if (pos != tokens.size()) throw ListOpsParseError("listops: trailing tokens");
  return n;
}

/// Splits on whitespace, also separating brackets: "[MED 4 [SM 1 2]]".
inline std::vector<std::string> listops_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n') {
      flush();
    } else if (c == '[' || c == ']') {
      flush();
      out.emplace_back(1, c);
    } else if (cur.empty() && c >= '0' && c <= '9') {
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

inline constexpr double kListOpsSubOpProb = 0.3;
inline constexpr int kListOpsMaxArgs = 5;

namespace detail {

/// Tree of parse depth `depth`: one random argument continues the spine,
/// the others are sub-operations of smaller depth with probability
/// kListOpsSubOpProb, else digits.
inline ListOpsNode listops_build(int depth, Rng& rng) {
  if (depth == 0) return ListOpsNode::leaf(static_cast<int>(rng.below(10)));
  ListOpsNode n{static_cast<ListOp>(1 + rng.below(4)), 0, {}};
  const int nargs = rng.range(1, kListOpsMaxArgs);
  const int spine = rng.range(0, nargs - 1);
  for (int a = 0; a < nargs; ++a) {
    if (a == spine)
      n.args.push_back(listops_build(depth - 1, rng));
    else if (depth > 1 && rng.bernoulli(kListOpsSubOpProb))
      n.args.push_back(listops_build(rng.range(1, depth - 1), rng));
    else
      n.args.push_back(ListOpsNode::leaf(static_cast<int>(rng.below(10))));
  }
  return n;
}

}  // namespace detail

/// Rejection-samples a tree whose dependency depth (and parse depth) equals
/// `depth`, with at most kMaxTokens tokens.
inline Sample listops_sample(int depth, Rng& rng) {
  for (;;) {
    const ListOpsNode root = detail::listops_build(depth, rng);
    Sample s;
    root.emit(s.tokens);
    if (s.tokens.size() > kMaxTokens) continue;
    const ListOpsResult r = listops_eval_node(root);
    if (r.dep_depth != depth) continue;
    s.target = std::to_string(r.value);
    s.depth = root.depth();
    s.dep_depth = r.dep_depth;
    return s;
  }
}

}  // namespace ndr::tasks
