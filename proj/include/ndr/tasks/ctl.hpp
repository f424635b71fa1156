#pragma once

// Compositional table lookup: a symbol followed by function letters in
// application order ("101 d a b" is b(a(d(101)))); backward order is the
// full token reversal.

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/rng.hpp"
#include "ndr/tasks/sample.hpp"

namespace ndr::tasks {

struct CtlSpec {
  static constexpr int kSymbols = 8;
  static constexpr int kFunctions = 9;

  /// tables[f][s] = image of symbol s under function letter 'a' + f.
  std::array<std::array<int, kSymbols>, kFunctions> tables{};

  static CtlSpec identity() {
    CtlSpec s;
    for (auto& t : s.tables)
      for (int i = 0; i < kSymbols; ++i) t[static_cast<std::size_t>(i)] = i;
    return s;
  }

  static CtlSpec random(Rng rng) {
    CtlSpec s;
    for (auto& t : s.tables) {
      std::vector<int> perm(kSymbols);
      for (int i = 0; i < kSymbols; ++i) perm[static_cast<std::size_t>(i)] = i;
      rng.shuffle(perm);
      std::copy(perm.begin(), perm.end(), t.begin());
    }
    return s;
  }

  bool is_bijective() const {
    for (const auto& t : tables) {
      std::array<bool, kSymbols> seen{};
      for (int v : t) {
        if (v < 0 || v >= kSymbols || seen[static_cast<std::size_t>(v)]) return false;
        seen[static_cast<std::size_t>(v)] = true;
      }
    }
    return true;
  }

  friend bool operator==(const CtlSpec&, const CtlSpec&) = default;
};

inline int ctl_symbol_index(const std::string& tok) {
  for (int s = 0; s < CtlSpec::kSymbols; ++s)
    if (Vocab::symbol_name(s) == tok) return s;
  throw std::invalid_argument("ctl: unknown symbol '" + tok + "'");
}

inline int ctl_function_index(const std::string& tok) {
  if (tok.size() != 1 || tok[0] < 'a' || tok[0] >= 'a' + CtlSpec::kFunctions)
    throw std::invalid_argument("ctl: unknown function letter '" + tok + "'");
  return tok[0] - 'a';
}

/// Applies `functions` (letters, in application order) to `symbol`.
inline std::string ctl_eval(const std::string& symbol, const std::vector<std::string>& functions, const CtlSpec& spec) {
  int s = ctl_symbol_index(symbol);
  for (const auto& f : functions) s = spec.tables[static_cast<std::size_t>(ctl_function_index(f))][static_cast<std::size_t>(s)];
  return Vocab::symbol_name(s);
}

/// Evaluates a forward or backward token sequence.
inline std::string ctl_eval_tokens(const std::vector<std::string>& tokens, const CtlSpec& spec, bool backward) {
  if (tokens.empty()) throw std::invalid_argument("ctl: empty sequence");
  std::vector<std::string> fwd = tokens;
  if (backward) std::reverse(fwd.begin(), fwd.end());
  return ctl_eval(fwd.front(), std::vector<std::string>(fwd.begin() + 1, fwd.end()), spec);
}

inline Sample ctl_make(int symbol, const std::vector<int>& functions, const CtlSpec& spec) {
  Sample s;
  s.tokens.push_back(Vocab::symbol_name(symbol));
  std::vector<std::string> letters;
  for (int f : functions) letters.emplace_back(1, static_cast<char>('a' + f));
  s.tokens.insert(s.tokens.end(), letters.begin(), letters.end());
  s.target = ctl_eval(s.tokens.front(), letters, spec);
  s.depth = static_cast<int>(functions.size());
  return s;
}

/// Random forward sample with `depth` functions.
inline Sample ctl_sample(int depth, Rng& rng, const CtlSpec& spec) {
  const int symbol = static_cast<int>(rng.below(CtlSpec::kSymbols));
  std::vector<int> fns(static_cast<std::size_t>(depth));
  for (auto& f : fns) f = static_cast<int>(rng.below(CtlSpec::kFunctions));
  return ctl_make(symbol, fns, spec);
}

/// All 72 single-function samples.
inline std::vector<Sample> ctl_unit_pairs(const CtlSpec& spec) {
  std::vector<Sample> out;
  for (int f = 0; f < CtlSpec::kFunctions; ++f)
    for (int s = 0; s < CtlSpec::kSymbols; ++s) out.push_back(ctl_make(s, {f}, spec));
  return out;
}

inline Sample ctl_reverse(Sample s) {
  std::reverse(s.tokens.begin(), s.tokens.end());
  return s;
}

}  // namespace ndr::tasks
