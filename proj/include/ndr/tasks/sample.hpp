#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ndr::tasks {

enum class Task { ctl_fwd, ctl_bwd, arith, listops };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::ctl_fwd: return "ctl_fwd";
    case Task::ctl_bwd: return "ctl_bwd";
    case Task::arith: return "arith";
    case Task::listops: return "listops";
  }
  return "?";
}

inline Task task_from_string(const std::string& s) {
  if (s == "ctl_fwd") return Task::ctl_fwd;
  if (s == "ctl_bwd") return Task::ctl_bwd;
  if (s == "arith") return Task::arith;
  if (s == "listops") return Task::listops;
  throw std::invalid_argument("unknown task: " + s);
}

inline bool is_ctl(Task t) { return t == Task::ctl_fwd || t == Task::ctl_bwd; }

/// Longest arithmetic/ListOps sample before B/E wrapping.
inline constexpr std::size_t kMaxTokens = 50;

struct Sample {
  std::vector<std::string> tokens;
  std::string target;
  int depth = 0;
  std::optional<int> dep_depth;  // ListOps only

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct SplitSpec {
  std::string name;
  int min_depth = 0;
  int max_depth = 0;
  std::size_t size = 0;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

/// Depth ranges and sizes of train, valid_iid, valid_ood and test.
struct SplitPlan {
  std::vector<SplitSpec> splits;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n{"train", "valid_iid", "valid_ood", "test"};
    return n;
  }

  const SplitSpec& at(const std::string& name) const {
    for (const auto& s : splits)
      if (s.name == name) return s;
    throw std::out_of_range("split plan has no split " + name);
  }

  SplitSpec& at(const std::string& name) { return const_cast<SplitSpec&>(std::as_const(*this).at(name)); }

  static SplitPlan defaults(Task task) {
    switch (task) {
      case Task::ctl_fwd:
      case Task::ctl_bwd:
        return {{{"train", 1, 5, 53704}, {"valid_iid", 1, 5, 1000}, {"valid_ood", 6, 8, 1000}, {"test", 9, 10, 1000}}};
      case Task::arith:
        return {{{"train", 0, 5, 100000}, {"valid_iid", 0, 5, 1000}, {"valid_ood", 6, 6, 1000}, {"test", 7, 8, 1000}}};
      case Task::listops:
        return {{{"train", 0, 5, 1000000}, {"valid_iid", 0, 5, 1000}, {"valid_ood", 6, 6, 1000}, {"test", 7, 8, 1000}}};
    }
    throw std::logic_error("unreachable task");
  }

  /// Applies `<split>_depths=a-b` and `<split>_size=n` overrides; returns false for other keys.
  bool apply_override(const std::string& key, const std::string& value) {
    for (const auto& n : names()) {
      if (key == n + "_depths") {
        const auto dash = value.find('-');
        auto& s = at(n);
        s.min_depth = std::stoi(value.substr(0, dash));
        s.max_depth = dash == std::string::npos ? s.min_depth : std::stoi(value.substr(dash + 1));
        if (s.max_depth < s.min_depth) throw std::invalid_argument("split plan: empty depth range for " + n);
        return true;
      }
      if (key == n + "_size") {
        at(n).size = std::stoul(value);
        return true;
      }
    }
    return false;
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv;
    for (const auto& s : splits) {
      kv[s.name + "_depths"] = std::to_string(s.min_depth) + "-" + std::to_string(s.max_depth);
      kv[s.name + "_size"] = std::to_string(s.size);
    }
    return kv;
  }

  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

/// Per-depth sample counts for a split: equal shares, the first depths take
/// the remainder one each.
inline std::vector<std::size_t> depth_quotas(const SplitSpec& s) {
  const auto n = static_cast<std::size_t>(s.max_depth - s.min_depth + 1);
  std::vector<std::size_t> q(n, s.size / n);
  for (std::size_t i = 0; i < s.size % n; ++i) ++q[i];
  return q;
}

/// Input tokens (id 0 is padding) and output classes of a task.
class Vocab {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBegin = "<B>";
  static constexpr const char* kEnd = "<E>";

  Vocab() = default;
  Vocab(std::vector<std::string> tokens, std::vector<std::string> classes)
      : tokens_(std::move(tokens)), classes_(std::move(classes)) {
    if (tokens_.empty() || tokens_[0] != kPad) throw std::invalid_argument("vocab: token 0 must be padding");
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (!token_ids_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("vocab: duplicate token " + tokens_[i]);
    for (std::size_t i = 0; i < classes_.size(); ++i)
      if (!class_ids_.emplace(classes_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("vocab: duplicate class " + classes_[i]);
    token_id(kBegin);
    token_id(kEnd);
  }

  static Vocab for_task(Task task) {
    std::vector<std::string> tok{kPad}, cls;
    if (is_ctl(task)) {
      for (int s = 0; s < 8; ++s) cls.push_back(symbol_name(s));
      tok.insert(tok.end(), cls.begin(), cls.end());
      for (char f = 'a'; f <= 'i'; ++f) tok.emplace_back(1, f);
    } else {
      for (char c = '0'; c <= '9'; ++c) cls.emplace_back(1, c);
      tok.insert(tok.end(), cls.begin(), cls.end());
      if (task == Task::arith)
        tok.insert(tok.end(), {"(", ")", "+", "*"});
      else
        tok.insert(tok.end(), {"[", "]", "SM", "MIN", "MAX", "MED"});
    }
    tok.emplace_back(kBegin);
    tok.emplace_back(kEnd);
    return Vocab(std::move(tok), std::move(cls));
  }

  /// CTL symbol s in 0..7 as its 3-bit string.
  static std::string symbol_name(int s) {
    return {static_cast<char>('0' + ((s >> 2) & 1)), static_cast<char>('0' + ((s >> 1) & 1)),
            static_cast<char>('0' + (s & 1))};
  }

  int token_id(const std::string& t) const {
    auto it = token_ids_.find(t);
    if (it == token_ids_.end()) throw std::out_of_range("vocab: unknown token '" + t + "'");
    return it->second;
  }

  int class_id(const std::string& c) const {
    auto it = class_ids_.find(c);
    if (it == class_ids_.end()) throw std::out_of_range("vocab: unknown class '" + c + "'");
    return it->second;
  }

  /// <B> tokens... <E>
  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    if (tokens.empty()) throw std::invalid_argument("vocab: empty sequence");
    std::vector<int> ids{token_id(kBegin)};
    for (const auto& t : tokens) ids.push_back(token_id(t));
    ids.push_back(token_id(kEnd));
    return ids;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t size() const { return tokens_.size(); }
  std::size_t n_classes() const { return classes_.size(); }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_ && a.classes_ == b.classes_; }

 private:
  std::vector<std::string> tokens_, classes_;
  std::unordered_map<std::string, int> token_ids_, class_ids_;
};

}  // namespace ndr::tasks
