#pragma once

// Per-example attention and gate traces, their JSON/PGM export, and ponder
// statistics of ACT checkpoints.
//
// Output directory of export_trace:
//   trace.json            full tensors, tokens, logits
//   att_t{step}_h{head}.pgm   one N x N map per step (1-based) and head (0-based)
//   att_t{step}_max.pgm   pixelwise max over the head maps of that step
//   gates.pgm             N wide, T high, mean gate per column and step
//   index.json            list of the files above

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndr/model.hpp"
#include "ndr/tasks/sample.hpp"

namespace ndr {

/// T x H x N x N attention weights.
struct AttentionTrace {
  std::size_t steps = 0, heads = 0, n = 0;
  std::vector<float> weights;

  float at(std::size_t t, std::size_t h, std::size_t i, std::size_t j) const {
    return weights[((t * heads + h) * n + i) * n + j];
  }
  std::vector<float> map(std::size_t t, std::size_t h) const {
    const auto* p = weights.data() + (t * heads + h) * n * n;
    return {p, p + n * n};
  }
};

/// T x N channel-mean gate activity plus the full T x N x d gate vectors.
struct GateTrace {
  std::size_t steps = 0, n = 0, d = 0;
  std::vector<float> mean;
  std::vector<float> full;

  float at(std::size_t t, std::size_t i) const { return mean[t * n + i]; }
};

/// Per-column readout step T^i of an ACT model.
struct PonderStats {
  std::vector<std::size_t> steps;
};

struct Trace {
  std::vector<std::string> tokens;  // including the begin/end markers
  std::string variant;
  AttentionTrace attention;
  std::optional<GateTrace> gates;
  std::optional<PonderStats> ponder;
  std::vector<float> logits;
  std::string prediction;
};

/// Runs one example with tracing on. `steps` defaults to the model's eval steps.
inline Trace capture(const EncoderModel<float>& model, const tasks::Vocab& vocab, const Batch& batch,
                     std::optional<std::size_t> steps = std::nullopt) {
  if (batch.size != 1) throw std::invalid_argument("capture: traces are per-example, got a batch of " +
                                                   std::to_string(batch.size));
  if (vocab.size() != model.config().vocab_size || vocab.n_classes() != model.config().n_classes)
    throw std::invalid_argument("capture: vocabulary does not match the model");
  StepContext ctx;
  const auto res = model.forward(batch, steps.value_or(model.config().eval_steps()), ctx, true);

  Trace tr;
  tr.variant = model.config().variant;
  for (std::size_t i = 0; i < batch.length; ++i) tr.tokens.push_back(vocab.tokens()[static_cast<std::size_t>(batch.ids[i])]);
  const std::size_t T = res.trace.size(), N = batch.length;
  tr.attention.steps = T;
  tr.attention.n = N;
  tr.attention.heads = T ? res.trace.front().attention.size(1) : 0;
  for (const auto& st : res.trace) {
    const auto w = st.attention.data();
    tr.attention.weights.insert(tr.attention.weights.end(), w.begin(), w.end());
  }
  if (T && res.trace.front().gate.defined()) {
    GateTrace g;
    g.steps = T;
    g.n = N;
    g.d = res.trace.front().gate.size(-1);
    for (const auto& st : res.trace) {
      const auto v = st.gate.data();
      g.full.insert(g.full.end(), v.begin(), v.end());
      for (std::size_t i = 0; i < N; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < g.d; ++c) s += v[i * g.d + c];
        g.mean.push_back(static_cast<float>(s / static_cast<double>(g.d)));
      }
    }
    tr.gates = std::move(g);
  }
  if (!res.ponder_steps.empty()) tr.ponder = PonderStats{res.ponder_steps};
  const auto l = res.logits.data();
  tr.logits.assign(l.begin(), l.end());
  tr.prediction = vocab.classes()[argmax_rows(res.logits).front()];
  return tr;
}

/// Encodes raw task tokens (without markers) and captures them.
inline Trace capture(const EncoderModel<float>& model, const tasks::Vocab& vocab,
                     const std::vector<std::string>& tokens, std::optional<std::size_t> steps = std::nullopt) {
  return capture(model, vocab, make_batch({vocab.encode(tokens)}, {}), steps);
}

/// Step (1-based) at which each column's cumulative mean gate activity first
/// exceeds 0.5; nullopt if it never does.
inline std::vector<std::optional<std::size_t>> gate_frontier(const GateTrace& g) {
  std::vector<std::optional<std::size_t>> out(g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    double acc = 0;
    for (std::size_t t = 0; t < g.steps && !out[i]; ++t) {
      acc += g.at(t, i);
      if (acc > 0.5) out[i] = t + 1;
    }
  }
  return out;
}

/// Soft diagnostic: the frontier step is non-decreasing over the columns
/// that open at all.
inline bool frontier_is_monotone(const GateTrace& g) {
  std::size_t last = 0;
  for (const auto& f : gate_frontier(g)) {
    if (!f) continue;
    if (*f < last) return false;
    last = *f;
  }
  return true;
}

// ---------------------------------------------------------------- PGM

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

/// Linear scaling: 0 maps to black, the image maximum to white.
inline GrayImage to_gray(const std::vector<float>& values, std::size_t width, std::size_t height) {
  if (values.size() != width * height) throw std::invalid_argument("to_gray: size mismatch");
  GrayImage img{width, height, std::vector<std::uint8_t>(values.size(), 0)};
  float mx = 0;
  for (float v : values) mx = std::max(mx, v);
  if (mx <= 0) return img;
  for (std::size_t i = 0; i < values.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(values[i] / mx, 0.0f, 1.0f)));
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  GrayImage img;
  int maxval = 0;
  f >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || !f) throw std::runtime_error("not an 8-bit P5 image: " + path.string());
  f.get();
  img.pixels.resize(img.width * img.height);
  if (!f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw std::runtime_error("truncated image: " + path.string());
  return img;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::ordered_json trace_to_json(const Trace& tr) {
  nlohmann::ordered_json j;
  j["tokens"] = tr.tokens;
  j["variant"] = tr.variant;
  j["prediction"] = tr.prediction;
  j["logits"] = tr.logits;
  j["attention"] = {{"steps", tr.attention.steps},
                    {"heads", tr.attention.heads},
                    {"n", tr.attention.n},
                    {"weights", tr.attention.weights}};
  if (tr.gates)
    j["gates"] = {{"steps", tr.gates->steps},
                  {"n", tr.gates->n},
                  {"d", tr.gates->d},
                  {"mean", tr.gates->mean},
                  {"full", tr.gates->full}};
  if (tr.ponder) j["ponder_steps"] = tr.ponder->steps;
  return j;
}

inline Trace trace_from_json(const nlohmann::json& j) {
  Trace tr;
  tr.tokens = j.at("tokens").get<std::vector<std::string>>();
  tr.variant = j.at("variant").get<std::string>();
  tr.prediction = j.at("prediction").get<std::string>();
  tr.logits = j.at("logits").get<std::vector<float>>();
  const auto& a = j.at("attention");
  tr.attention = {a.at("steps").get<std::size_t>(), a.at("heads").get<std::size_t>(), a.at("n").get<std::size_t>(),
                  a.at("weights").get<std::vector<float>>()};
  if (tr.attention.weights.size() != tr.attention.steps * tr.attention.heads * tr.attention.n * tr.attention.n)
    throw std::runtime_error("trace: attention size does not match its shape");
  if (j.contains("gates")) {
    const auto& g = j.at("gates");
    tr.gates = GateTrace{g.at("steps").get<std::size_t>(), g.at("n").get<std::size_t>(), g.at("d").get<std::size_t>(),
                         g.at("mean").get<std::vector<float>>(), g.at("full").get<std::vector<float>>()};
  }
  if (j.contains("ponder_steps")) tr.ponder = PonderStats{j.at("ponder_steps").get<std::vector<std::size_t>>()};
  return tr;
}

inline Trace load_trace(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  return trace_from_json(nlohmann::json::parse(f));
}

/// Writes the JSON, one heatmap per step and head, the head-max maps, the
/// gate map and an index.
inline void export_trace(const Trace& tr, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  {
    std::ofstream f(dir / "trace.json");
    if (!f) throw std::runtime_error("cannot write " + (dir / "trace.json").string());
    f << trace_to_json(tr).dump() << '\n';
  }
  nlohmann::ordered_json index;
  index["trace"] = "trace.json";
  index["attention"] = nlohmann::ordered_json::array();
  index["attention_max"] = nlohmann::ordered_json::array();
  const auto& a = tr.attention;
  for (std::size_t t = 0; t < a.steps; ++t) {
    GrayImage mx{a.n, a.n, std::vector<std::uint8_t>(a.n * a.n, 0)};
    for (std::size_t h = 0; h < a.heads; ++h) {
      const GrayImage img = to_gray(a.map(t, h), a.n, a.n);
      for (std::size_t i = 0; i < img.pixels.size(); ++i) mx.pixels[i] = std::max(mx.pixels[i], img.pixels[i]);
      const std::string name = "att_t" + std::to_string(t + 1) + "_h" + std::to_string(h) + ".pgm";
      write_pgm(dir / name, img);
      index["attention"].push_back({{"step", t + 1}, {"head", h}, {"file", name}});
    }
    const std::string name = "att_t" + std::to_string(t + 1) + "_max.pgm";
    write_pgm(dir / name, mx);
    index["attention_max"].push_back({{"step", t + 1}, {"file", name}});
  }
  if (tr.gates) {
    write_pgm(dir / "gates.pgm", to_gray(tr.gates->mean, tr.gates->n, tr.gates->steps));
    index["gates"] = "gates.pgm";
  }
  std::ofstream f(dir / "index.json");
  if (!f) throw std::runtime_error("cannot write " + (dir / "index.json").string());
  f << index.dump(2) << '\n';
}

// ---------------------------------------------------------------- ponder

struct PonderRow {
  std::size_t length = 0;     // encoded length, markers included
  std::size_t sequences = 0;
  double mean = 0.0;          // over all columns of those sequences
  double stddev = 0.0;
};

/// Mean and standard deviation of the readout step T^i per sequence length.
inline std::vector<PonderRow> ponder_report(const EncoderModel<float>& model, const tasks::Vocab& vocab,
                                            const std::vector<tasks::Sample>& samples,
                                            std::optional<std::size_t> steps = std::nullopt,
                                            std::size_t batch_size = 256) {
  if (!model.config().act) throw std::invalid_argument("ponder_report: checkpoint has no adaptive halting");
  std::map<std::size_t, std::vector<double>> by_len;
  std::map<std::size_t, std::size_t> seqs;
  StepContext ctx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::vector<int>> ids;
    for (std::size_t r = start; r < std::min(samples.size(), start + batch_size); ++r)
      ids.push_back(vocab.encode(samples[r].tokens));
    const Batch b = make_batch(ids, {});
    const auto res = model.forward(b, steps.value_or(model.config().eval_steps()), ctx);
    for (std::size_t r = 0; r < b.size; ++r) {
      const std::size_t len = b.lengths[r];
      ++seqs[len];
      for (std::size_t i = 0; i < len; ++i) by_len[len].push_back(static_cast<double>(res.ponder_steps[r * b.length + i]));
    }
  }
  std::vector<PonderRow> out;
  for (const auto& [len, v] : by_len) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    out.push_back({len, seqs[len], m, std::sqrt(s / static_cast<double>(v.size()))});
  }
  return out;
}

}  // namespace ndr
