#pragma once

// Split generation, JSONL serialization and the dataset manifest.
//
// Each (split, depth) quota is cut into shards of kShardSize samples and
// every shard draws from its own named stream, so output does not depend
// on how many workers generate it. Splits are shuffled after assembly.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ndr/rng.hpp"
#include "ndr/tasks/arith.hpp"
#include "ndr/tasks/ctl.hpp"
#include "ndr/tasks/listops.hpp"
#include "ndr/tasks/sample.hpp"

namespace ndr::tasks {

inline constexpr std::size_t kShardSize = 1000;

struct Dataset {
  Task task = Task::ctl_fwd;
  std::uint64_t seed = 0;
  SplitPlan plan;
  std::optional<CtlSpec> ctl;
  Vocab vocab;
  std::map<std::string, std::vector<Sample>> splits;

  const std::vector<Sample>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw std::out_of_range("dataset has no split " + name);
    return it->second;
  }
};

inline CtlSpec ctl_spec_for_seed(std::uint64_t seed) { return CtlSpec::random(Rng::stream(seed, "ctl/tables")); }

/// One forward-order sample of `task` at `depth`.
inline Sample sample_task(Task task, int depth, Rng& rng, const CtlSpec* ctl) {
  switch (task) {
    case Task::ctl_fwd:
    case Task::ctl_bwd: return ctl_sample(depth, rng, *ctl);
    case Task::arith: return arith_sample(depth, rng);
    case Task::listops: return listops_sample(depth, rng);
  }
  throw std::logic_error("unreachable task");
}

namespace detail {

struct Shard {
  std::string split;
  int depth = 0;
  std::size_t index = 0;
  std::size_t count = 0;
  std::vector<Sample> out;
};

inline void run_parallel(std::vector<Shard>& shards, unsigned workers, const std::function<void(Shard&)>& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(shards.size())));
  if (workers == 1) {
    for (auto& s : shards) fn(s);
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < shards.size(); i += workers) fn(shards[i]);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Generates every split of the plan. CTL train depth 1 always starts with
/// the 72 (function, symbol) unit pairs; backward CTL is the token reversal
/// of forward CTL generated from the same seed.
inline Dataset generate_dataset(Task task, const SplitPlan& plan, std::uint64_t seed, unsigned workers = 1) {
  Dataset ds;
  ds.task = task;
  ds.seed = seed;
  ds.plan = plan;
  ds.vocab = Vocab::for_task(task);
  if (is_ctl(task)) ds.ctl = ctl_spec_for_seed(seed);

  std::vector<detail::Shard> shards;
  std::map<std::string, std::vector<Sample>> fixed;
  for (const auto& spec : plan.splits) {
    if (is_ctl(task) && spec.min_depth < 1) throw std::invalid_argument("ctl: depths start at 1");
    const auto quotas = depth_quotas(spec);
    for (std::size_t k = 0; k < quotas.size(); ++k) {
      const int depth = spec.min_depth + static_cast<int>(k);
      std::size_t need = quotas[k];
      if (is_ctl(task) && spec.name == "train" && depth == 1) {
        auto units = ctl_unit_pairs(*ds.ctl);
        const std::size_t take = std::min(need, units.size());
        fixed[spec.name].insert(fixed[spec.name].end(), units.begin(), units.begin() + static_cast<std::ptrdiff_t>(take));
        need -= take;
      }
      for (std::size_t i = 0; need > 0; ++i) {
        const std::size_t c = std::min(need, kShardSize);
        shards.push_back({spec.name, depth, i, c, {}});
        need -= c;
      }
    }
  }
  const CtlSpec* ctl = ds.ctl ? &*ds.ctl : nullptr;
  detail::run_parallel(shards, workers, [&](detail::Shard& s) {
    Rng rng = Rng::stream(seed, "data/" + s.split + "/d" + std::to_string(s.depth) + "/s" + std::to_string(s.index));
    s.out.reserve(s.count);
    for (std::size_t i = 0; i < s.count; ++i) s.out.push_back(sample_task(task, s.depth, rng, ctl));
  });

  for (const auto& spec : plan.splits) {
    auto& out = ds.splits[spec.name];
    out = std::move(fixed[spec.name]);
    for (auto& s : shards)
      if (s.split == spec.name) std::move(s.out.begin(), s.out.end(), std::back_inserter(out));
    Rng shuffle = Rng::stream(seed, "data/" + spec.name + "/shuffle");
    shuffle.shuffle(out);
    if (task == Task::ctl_bwd)
      for (auto& s : out) s = ctl_reverse(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------- JSONL

inline nlohmann::ordered_json sample_to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["tokens"] = s.tokens;
  j["target"] = s.target;
  j["depth"] = s.depth;
  j["dep_depth"] = s.dep_depth ? nlohmann::ordered_json(*s.dep_depth) : nlohmann::ordered_json(nullptr);
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.tokens = j.at("tokens").get<std::vector<std::string>>();
  s.target = j.at("target").get<std::string>();
  s.depth = j.at("depth").get<int>();
  if (j.contains("dep_depth") && !j.at("dep_depth").is_null()) s.dep_depth = j.at("dep_depth").get<int>();
  return s;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) f << sample_to_json(s).dump() << '\n';
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<Sample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- manifest

inline nlohmann::ordered_json manifest_json(const Dataset& ds) {
  nlohmann::ordered_json m;
  m["task"] = to_string(ds.task);
  m["seed"] = ds.seed;
  nlohmann::ordered_json plan = nlohmann::ordered_json::array();
  for (const auto& s : ds.plan.splits)
    plan.push_back({{"name", s.name}, {"min_depth", s.min_depth}, {"max_depth", s.max_depth}, {"size", s.size}});
  m["plan"] = plan;
  if (ds.ctl) {
    nlohmann::ordered_json tables = nlohmann::ordered_json::object();
    for (int f = 0; f < CtlSpec::kFunctions; ++f) {
      std::vector<std::string> images;
      for (int v : ds.ctl->tables[static_cast<std::size_t>(f)]) images.push_back(Vocab::symbol_name(v));
      tables[std::string(1, static_cast<char>('a' + f))] = images;
    }
    m["ctl_tables"] = tables;
  }
  m["vocab"] = {{"tokens", ds.vocab.tokens()}, {"classes", ds.vocab.classes()}};
  nlohmann::ordered_json counts = nlohmann::ordered_json::object();
  for (const auto& name : SplitPlan::names())
    if (ds.splits.count(name)) counts[name] = ds.split(name).size();
  m["counts"] = counts;
  return m;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, samples] : ds.splits) write_jsonl(dir / (name + ".jsonl"), samples);
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
  f << manifest_json(ds).dump(2) << '\n';
}

/// Reads the manifest and every split file listed in its plan.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir.string());
  const nlohmann::json m = nlohmann::json::parse(f);
  Dataset ds;
  ds.task = task_from_string(m.at("task").get<std::string>());
  ds.seed = m.at("seed").get<std::uint64_t>();
  for (const auto& s : m.at("plan"))
    ds.plan.splits.push_back({s.at("name").get<std::string>(), s.at("min_depth").get<int>(),
                              s.at("max_depth").get<int>(), s.at("size").get<std::size_t>()});
  if (m.contains("ctl_tables")) {
    CtlSpec spec;
    for (int fn = 0; fn < CtlSpec::kFunctions; ++fn) {
      const auto images = m.at("ctl_tables").at(std::string(1, static_cast<char>('a' + fn))).get<std::vector<std::string>>();
      if (images.size() != CtlSpec::kSymbols) throw std::runtime_error("manifest: malformed CTL table");
      for (int s = 0; s < CtlSpec::kSymbols; ++s)
        spec.tables[static_cast<std::size_t>(fn)][static_cast<std::size_t>(s)] = ctl_symbol_index(images[static_cast<std::size_t>(s)]);
    }
    ds.ctl = spec;
  }
  ds.vocab = Vocab(m.at("vocab").at("tokens").get<std::vector<std::string>>(),
                   m.at("vocab").at("classes").get<std::vector<std::string>>());
  for (const auto& s : ds.plan.splits) ds.splits[s.name] = read_jsonl(dir / (s.name + ".jsonl"));
  return ds;
}

}  // namespace ndr::tasks
