#pragma once

// Flat key=value run configuration. Every field is a key; per-task and
// per-variant defaults follow the published hyperparameter tables.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/model.hpp"
#include "ndr/tasks/sample.hpp"

namespace ndr::harness {

using tasks::Task;

struct RunConfig {
  Task task = Task::ctl_fwd;
  std::string variant = "ndr";
  std::size_t d_model = 256;
  std::size_t d_ff = 512;
  std::size_t n_heads = 1;
  std::size_t n_layers = 14;
  std::size_t test_steps = 0;  // 0: same as n_layers
  Readout readout = Readout::last;
  std::string act = "none";  // none, A or U
  double act_epsilon = 0.01;
  double act_weight = 0.03;
  std::size_t batch_size = 512;
  double lr = 1.5e-4;
  double weight_decay = 0.01;
  double dropout = 0.5;
  double attn_dropout = 0.1;
  double grad_clip = 5.0;
  std::size_t n_iters = 30000;
  std::size_t eval_every = 1000;
  std::size_t eval_batch_size = 256;
  std::uint64_t seed = 0;
  std::string data_dir;
  double stop_iid_accuracy = 0.0;  // > 0: stop once valid_iid accuracy reaches it
  tasks::SplitPlan plan = tasks::SplitPlan::defaults(Task::ctl_fwd);

  /// Table defaults for a task/variant pair.
  static RunConfig defaults(Task task, const std::string& variant) {
    LayerVariant::named(variant);
    RunConfig c;
    c.task = task;
    c.variant = variant;
    c.plan = tasks::SplitPlan::defaults(task);
    const bool gated = LayerVariant::named(variant).gated;
    c.attn_dropout = 0.1;
    c.eval_every = 1000;
    c.batch_size = 512;
    if (tasks::is_ctl(task)) {
      c.grad_clip = 5.0;
      c.n_iters = 30000;
      if (gated) {
        c.d_model = 256, c.d_ff = 512, c.n_heads = 1, c.n_layers = 14;
        c.lr = variant == "ndr" ? 1.5e-4 : 2e-4;
        c.weight_decay = 0.01, c.dropout = 0.5;
      } else {
        c.d_model = 128, c.d_ff = 256, c.n_heads = 4, c.n_layers = 11;
        c.lr = 1.5e-4, c.weight_decay = 0.0025, c.dropout = 0.1;
      }
    } else if (task == Task::arith) {
      c.grad_clip = 1.0;
      c.lr = 1.5e-4, c.dropout = 0.5;
      if (gated) {
        c.d_model = 256, c.d_ff = 1024, c.n_heads = 4, c.n_layers = 15;
        c.weight_decay = 0.01, c.n_iters = 100000;
      } else {
        c.d_model = 128, c.d_ff = 256, c.n_heads = 4, c.n_layers = 11;
        c.weight_decay = 0.0025, c.n_iters = 200000;
      }
    } else {
      c.grad_clip = 1.0;
      if (gated) {
        c.d_model = 512, c.d_ff = 1024, c.n_heads = 16, c.n_layers = 20, c.test_steps = 24;
        c.lr = 2e-4, c.weight_decay = 0.09, c.dropout = 0.1, c.n_iters = 100000;
      } else {
        c.d_model = 256, c.d_ff = 1024, c.n_heads = 16, c.n_layers = 6;
        c.lr = 4e-4, c.weight_decay = 0.05, c.dropout = 0.015, c.n_iters = 200000;
        c.attn_dropout = 0.05;
      }
    }
    return c;
  }

  std::size_t eval_steps() const { return test_steps == 0 ? n_layers : test_steps; }

  ModelConfig model_config(const tasks::Vocab& vocab) const {
    ModelConfig m;
    m.vocab_size = vocab.size();
    m.n_classes = vocab.n_classes();
    m.d_model = d_model;
    m.d_ff = d_ff;
    m.n_heads = n_heads;
    m.n_layers = n_layers;
    m.test_steps = test_steps;
    m.variant = variant;
    m.readout = readout;
    if (act != "none") m.act = ActConfig{act_variant_from_string(act), n_layers, act_epsilon, act_weight};
    m.dropout = dropout;
    m.attn_dropout = attn_dropout;
    return m;
  }

  /// Sets one key; plan keys are `<split>_depths` / `<split>_size`.
  void set(const std::string& key, const std::string& value) {
    try {
      if (key == "task") {
        task = tasks::task_from_string(value);
      } else if (key == "variant") {
        LayerVariant::named(value);
        variant = value;
      } else if (key == "d_model") {
        d_model = std::stoul(value);
      } else if (key == "d_ff") {
        d_ff = std::stoul(value);
      } else if (key == "n_heads") {
        n_heads = std::stoul(value);
      } else if (key == "n_layers") {
        n_layers = std::stoul(value);
      } else if (key == "test_steps") {
        test_steps = std::stoul(value);
      } else if (key == "readout") {
        readout = readout_from_string(value);
      } else if (key == "act") {
        if (value != "none") act_variant_from_string(value);
        act = value;
      } else if (key == "act_epsilon") {
        act_epsilon = std::stod(value);
      } else if (key == "act_weight") {
        act_weight = std::stod(value);
      } else if (key == "batch_size") {
        batch_size = std::stoul(value);
      } else if (key == "lr") {
        lr = std::stod(value);
      } else if (key == "weight_decay") {
        weight_decay = std::stod(value);
      } else if (key == "dropout") {
        dropout = std::stod(value);
      } else if (key == "attn_dropout") {
        attn_dropout = std::stod(value);
      } else if (key == "grad_clip") {
        grad_clip = std::stod(value);
      } else if (key == "n_iters") {
        n_iters = std::stoul(value);
      } else if (key == "eval_every") {
        eval_every = std::stoul(value);
      } else if (key == "eval_batch_size") {
        eval_batch_size = std::stoul(value);
      } else if (key == "seed") {
        seed = std::stoull(value);
      } else if (key == "data_dir") {
        data_dir = value;
      } else if (key == "stop_iid_accuracy") {
        stop_iid_accuracy = std::stod(value);
      } else if (!plan.apply_override(key, value)) {
        throw std::invalid_argument("unknown config key: " + key);
      }
    } catch (const std::invalid_argument& e) {
      if (std::string(e.what()).rfind("unknown", 0) == 0) throw;
      throw std::invalid_argument("config key " + key + ": bad value '" + value + "'");
    } catch (const std::out_of_range&) {
      throw std::invalid_argument("config key " + key + ": value out of range '" + value + "'");
    }
  }

  void validate() const {
    if (batch_size == 0 || eval_batch_size == 0) throw std::invalid_argument("config: batch sizes must be positive");
    if (eval_every == 0) throw std::invalid_argument("config: eval_every must be positive");
    if (lr < 0 || weight_decay < 0 || grad_clip <= 0) throw std::invalid_argument("config: lr, wd >= 0 and grad_clip > 0");
    if (test_steps != 0 && test_steps < n_layers) throw std::invalid_argument("config: test_steps must be >= n_layers");
    model_config(tasks::Vocab::for_task(task)).validate();
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv{
        {"task", tasks::to_string(task)},
        {"variant", variant},
        {"d_model", std::to_string(d_model)},
        {"d_ff", std::to_string(d_ff)},
        {"n_heads", std::to_string(n_heads)},
        {"n_layers", std::to_string(n_layers)},
        {"test_steps", std::to_string(test_steps)},
        {"readout", to_string(readout)},
        {"act", act},
        {"act_epsilon", ModelConfig::format_real(act_epsilon)},
        {"act_weight", ModelConfig::format_real(act_weight)},
        {"batch_size", std::to_string(batch_size)},
        {"lr", ModelConfig::format_real(lr)},
        {"weight_decay", ModelConfig::format_real(weight_decay)},
        {"dropout", ModelConfig::format_real(dropout)},
        {"attn_dropout", ModelConfig::format_real(attn_dropout)},
        {"grad_clip", ModelConfig::format_real(grad_clip)},
        {"n_iters", std::to_string(n_iters)},
        {"eval_every", std::to_string(eval_every)},
        {"eval_batch_size", std::to_string(eval_batch_size)},
        {"seed", std::to_string(seed)},
        {"data_dir", data_dir},
        {"stop_iid_accuracy", ModelConfig::format_real(stop_iid_accuracy)}};
    for (const auto& [k, v] : plan.to_kv()) kv[k] = v;
    return kv;
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : to_kv()) os << k << '=' << v << '\n';
    return os.str();
  }
};

/// Splits "key=value"; surrounding blanks are trimmed.
inline std::pair<std::string, std::string> split_kv(const std::string& line) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + line + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  return {trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
}

/// Parses config text: `#` comments, blank lines, key=value lines. `task`
/// and `variant` select the table defaults before other keys apply, so their
/// position in the file does not matter.
inline RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    entries.push_back(split_kv(line));
  }
  for (const auto& o : overrides) entries.push_back(split_kv(o));
  std::string task = "ctl_fwd", variant = "ndr";
  for (const auto& [k, v] : entries) {
    if (k == "task") task = v;
    if (k == "variant") variant = v;
  }
  RunConfig cfg = RunConfig::defaults(tasks::task_from_string(task), variant);
  for (const auto& [k, v] : entries) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

}  // namespace ndr::harness
