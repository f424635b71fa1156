#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/harness/train.hpp"

namespace ndr::harness {

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

/// Axes available by bare name.
inline const std::map<std::string, std::vector<std::string>>& predefined_axes() {
  static const std::map<std::string, std::vector<std::string>> axes{
      {"act_weight", {"0.001", "0.003", "0.01", "0.03", "0.1"}},
      {"n_layers", {"4", "6", "8", "10", "12", "14"}},
      {"readout", {"first", "last"}},
  };
  return axes;
}

/// "key=v1,v2,..." or the name of a predefined axis.
inline SweepAxis parse_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) {
    auto it = predefined_axes().find(text);
    if (it == predefined_axes().end()) throw std::invalid_argument("no predefined sweep axis '" + text + "'");
    return {it->first, it->second};
  }
  SweepAxis axis{text.substr(0, eq), {}};
  std::stringstream ss(text.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ','))
    if (!v.empty()) axis.values.push_back(v);
  if (axis.key.empty() || axis.values.empty()) throw std::invalid_argument("sweep axis needs key=v1,v2,...");
  return axis;
}

struct SweepRow {
  std::string value;
  TrainResult result;
};

inline bool affects_data(const std::string& key) {
  return key == "task" || key == "seed" || key == "data_dir" || key.find("_depths") != std::string::npos ||
         key.find("_size") != std::string::npos;
}

/// One independent train + evaluate per axis value, each in `out/<key>=<value>`.
/// Every value is applied and validated before any training starts.
inline std::vector<SweepRow> sweep(const RunConfig& base, const SweepAxis& axis, const fs::path& out,
                                   std::ostream* progress = nullptr) {
  std::vector<RunConfig> cfgs;
  for (const auto& v : axis.values) {
    RunConfig c = base;
    c.set(axis.key, v);
    c.validate();
    cfgs.push_back(c);
  }
  std::optional<tasks::Dataset> shared;
  if (!affects_data(axis.key)) shared = prepare_dataset(base);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    if (progress) *progress << axis.key << '=' << axis.values[i] << '\n';
    const fs::path dir = out / (axis.key + "=" + axis.values[i]);
    TrainResult r = shared ? train(cfgs[i], *shared, dir, {false, progress})
                           : train(cfgs[i], prepare_dataset(cfgs[i]), dir, {false, progress});
    rows.push_back({axis.values[i], r});
  }
  return rows;
}

/// Tab-separated table, one line per axis value.
inline std::string sweep_table(const SweepAxis& axis, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << axis.key << "\tbest_iter\tlast_valid_iid\tbest_valid_ood\ttest\n";
  for (const auto& r : rows)
    os << r.value << '\t' << r.result.best_iter << '\t' << r.result.last_iid << '\t' << r.result.best_ood << '\t'
       << r.result.test_accuracy << '\n';
  return os.str();
}

}  // namespace ndr::harness
