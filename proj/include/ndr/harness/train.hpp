#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndr/checkpoint.hpp"
#include "ndr/harness/config.hpp"
#include "ndr/tasks/dataset.hpp"

namespace ndr::harness {

namespace fs = std::filesystem;

/// Token ids (wrapped in B/E) and class ids of one split.
struct EncodedSplit {
  std::vector<std::vector<int>> ids;
  std::vector<int> targets;

  std::size_t size() const { return ids.size(); }
};

inline EncodedSplit encode_split(const std::vector<tasks::Sample>& samples, const tasks::Vocab& vocab) {
  EncodedSplit e;
  e.ids.reserve(samples.size());
  e.targets.reserve(samples.size());
  for (const auto& s : samples) {
    e.ids.push_back(vocab.encode(s.tokens));
    e.targets.push_back(vocab.class_id(s.target));
  }
  return e;
}

inline Batch batch_of(const EncodedSplit& split, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<int>> seqs;
  std::vector<int> targets;
  seqs.reserve(rows.size());
  for (auto r : rows) {
    seqs.push_back(split.ids[r]);
    targets.push_back(split.targets[r]);
  }
  return make_batch(seqs, targets);
}

/// Argmax predictions over a split, evaluated in order with `steps` shared steps.
inline std::vector<std::size_t> predict(const EncoderModel<float>& model, const EncodedSplit& split, std::size_t steps,
                                        std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(split.size());
  StepContext ctx;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> rows;
    for (std::size_t r = start; r < std::min(split.size(), start + batch_size); ++r) rows.push_back(r);
    const auto res = model.forward(batch_of(split, rows), steps, ctx);
    const auto pred = argmax_rows(res.logits);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

/// Exact-match accuracy of the argmax class.
inline double evaluate_accuracy(const EncoderModel<float>& model, const EncodedSplit& split, std::size_t steps,
                                std::size_t batch_size = 256) {
  if (split.size() == 0) throw std::invalid_argument("evaluate: empty split");
  const auto pred = predict(model, split, steps, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += static_cast<int>(pred[i]) == split.targets[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

inline std::string join_tokens(const std::vector<std::string>& xs) {
  std::string s;
  for (const auto& x : xs) s += (s.empty() ? "" : " ") + x;
  return s;
}

/// Fails unless the checkpoint was trained on the same vocabulary.
inline void check_vocab(const LoadedCheckpoint& ck, const tasks::Vocab& vocab) {
  auto it = ck.header.find("vocab.tokens");
  auto jt = ck.header.find("vocab.classes");
  if (it == ck.header.end() || jt == ck.header.end()) throw CheckpointError("checkpoint has no vocabulary record");
  if (it->second != join_tokens(vocab.tokens()) || jt->second != join_tokens(vocab.classes()))
    throw std::invalid_argument("vocabulary mismatch between checkpoint and dataset");
}

/// Loads `data_dir` when set, otherwise generates the task from the plan and seed.
inline tasks::Dataset prepare_dataset(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    tasks::Dataset ds = tasks::load_dataset(cfg.data_dir);
    if (ds.task != cfg.task) throw std::invalid_argument("dataset task does not match the config");
    return ds;
  }
  return tasks::generate_dataset(cfg.task, cfg.plan, cfg.seed);
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  bool resume = false;
  std::ostream* progress = nullptr;  // one line per evaluation
};

struct TrainResult {
  std::size_t iters_run = 0;
  double best_ood = -1.0;
  std::size_t best_iter = 0;
  double last_iid = 0.0;
  double test_accuracy = 0.0;  // from the best-OOD checkpoint
  bool stopped_early = false;
  fs::path best_checkpoint;
};

namespace detail {

inline std::string rng_text(const Rng& r) { return std::to_string(r.key()) + ":" + std::to_string(r.counter()); }

inline Rng rng_from_text(const std::string& s) {
  const auto c = s.find(':');
  if (c == std::string::npos) throw CheckpointError("checkpoint: malformed generator state");
  return Rng(std::stoull(s.substr(0, c)), std::stoull(s.substr(c + 1)));
}

/// Keeps training and validation records up to and including `iter`; test
/// reports are dropped since the resumed run writes its own.
inline void truncate_metrics(const fs::path& path, std::size_t iter) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) {
      const auto j = nlohmann::json::parse(line);
      if (j.at("iter").get<std::size_t>() <= iter && j.value("split", "") != "test") keep.push_back(line);
    }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace detail

/// Trains with uniform sampling with replacement, evaluates both validation
/// splits every eval_every iterations, keeps the best checkpoint by OOD
/// validation accuracy, and reports test accuracy from that checkpoint.
/// Writes metrics.jsonl, config.txt, last.ckpt and best.ckpt under `out`.
inline TrainResult train(const RunConfig& cfg, const tasks::Dataset& ds, const fs::path& out,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  fs::create_directories(out);
  {
    std::ofstream c(out / "config.txt");
    c << cfg.to_text();
  }
  const EncodedSplit train_split = encode_split(ds.split("train"), ds.vocab);
  const EncodedSplit iid = encode_split(ds.split("valid_iid"), ds.vocab);
  const EncodedSplit ood = encode_split(ds.split("valid_ood"), ds.vocab);
  const EncodedSplit test = encode_split(ds.split("test"), ds.vocab);
  if (train_split.size() == 0) throw std::invalid_argument("train: empty train split");

  EncoderModel<float> model(cfg.model_config(ds.vocab), Rng::stream(cfg.seed, "init"));
  AdamW<float> opt(AdamWConfig{cfg.lr, cfg.weight_decay});
  Rng data_rng = Rng::stream(cfg.seed, "batches");
  Rng dropout_rng = Rng::stream(cfg.seed, "dropout");
  TrainResult res;
  res.best_checkpoint = out / "best.ckpt";
  std::size_t iter = 0;

  const fs::path metrics_path = out / "metrics.jsonl";
  if (opts.resume && fs::exists(out / "last.ckpt")) {
    LoadedCheckpoint ck = load_checkpoint(out / "last.ckpt");
    check_vocab(ck, ds.vocab);
    model = std::move(ck.model);
    opt = std::move(ck.optimizer);
    opt.config() = AdamWConfig{cfg.lr, cfg.weight_decay};
    iter = std::stoul(ck.get("state.iter"));
    res.best_ood = std::stod(ck.get("state.best_ood"));
    res.best_iter = std::stoul(ck.get("state.best_iter"));
    data_rng = detail::rng_from_text(ck.get("rng.batches"));
    dropout_rng = detail::rng_from_text(ck.get("rng.dropout"));
    detail::truncate_metrics(metrics_path, iter);
  } else {
    std::ofstream(metrics_path, std::ios::trunc);
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  auto log = [&metrics](const nlohmann::ordered_json& j) { metrics << j.dump() << '\n' << std::flush; };

  const auto params = model.parameters();
  check_unique_names(std::span<const Parameter<float>>(params));
  auto header = [&](std::size_t at) {
    std::map<std::string, std::string> h{{"vocab.tokens", join_tokens(ds.vocab.tokens())},
                                         {"vocab.classes", join_tokens(ds.vocab.classes())},
                                         {"run.task", tasks::to_string(cfg.task)},
                                         {"run.seed", std::to_string(cfg.seed)},
                                         {"state.iter", std::to_string(at)},
                                         {"state.best_ood", ModelConfig::format_real(res.best_ood)},
                                         {"state.best_iter", std::to_string(res.best_iter)},
                                         {"rng.batches", detail::rng_text(data_rng)},
                                         {"rng.dropout", detail::rng_text(dropout_rng)},
                                         {"run.data_dir", cfg.data_dir}};
    for (const auto& [k, v] : ds.plan.to_kv()) h["plan." + k] = v;
    return h;
  };

  while (iter < cfg.n_iters) {
    std::vector<std::size_t> rows(cfg.batch_size);
    for (auto& r : rows) r = static_cast<std::size_t>(data_rng.below(train_split.size()));
    const Batch batch = batch_of(train_split, rows);

    zero_grad(std::span<const Parameter<float>>(params));
    Tape<float> tape;
    double loss_value = 0.0;
    {
      TapeScope<float> scope(tape);
      StepContext ctx{true, &dropout_rng};
      const auto fwd = model.forward(batch, cfg.n_layers, ctx);
      const Tensor<float> loss = model.loss(fwd, batch.targets);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        save_checkpoint(out / "diverged.ckpt", model, opt, header(iter));
        throw TrainingDiverged("non-finite loss at iteration " + std::to_string(iter + 1) + "; state saved to " +
                               (out / "diverged.ckpt").string());
      }
      tape.backward(loss);
    }
    clip_gradients(std::span<const Parameter<float>>(params), cfg.grad_clip);
    const double norm = grad_norm(std::span<const Parameter<float>>(params));  // post-clip
    try {
      opt.step(std::span<const Parameter<float>>(params));
    } catch (const NonFiniteGradient& e) {
      save_checkpoint(out / "diverged.ckpt", model, opt, header(iter));
      throw TrainingDiverged(std::string(e.what()) + "; state saved to " + (out / "diverged.ckpt").string());
    }
    ++iter;
    log({{"iter", iter}, {"loss", loss_value}, {"grad_norm", norm}});

    if (iter % cfg.eval_every == 0 || iter == cfg.n_iters) {
      const std::size_t steps = cfg.eval_steps();
      res.last_iid = evaluate_accuracy(model, iid, steps, cfg.eval_batch_size);
      const double ood_acc = evaluate_accuracy(model, ood, steps, cfg.eval_batch_size);
      log({{"iter", iter}, {"split", "valid_iid"}, {"accuracy", res.last_iid}});
      log({{"iter", iter}, {"split", "valid_ood"}, {"accuracy", ood_acc}});
      if (ood_acc > res.best_ood) {
        res.best_ood = ood_acc;
        res.best_iter = iter;
        save_checkpoint(res.best_checkpoint, model, opt, header(iter));
      }
      save_checkpoint(out / "last.ckpt", model, opt, header(iter));
      if (opts.progress)
        *opts.progress << "iter " << iter << " loss " << loss_value << " valid_iid " << res.last_iid << " valid_ood "
                       << ood_acc << '\n';
      if (cfg.stop_iid_accuracy > 0 && res.last_iid >= cfg.stop_iid_accuracy) {
        res.stopped_early = true;
        break;
      }
    }
  }
  res.iters_run = iter;
  if (!fs::exists(res.best_checkpoint)) save_checkpoint(res.best_checkpoint, model, opt, header(iter));

  const LoadedCheckpoint best = load_checkpoint(res.best_checkpoint);
  res.test_accuracy = evaluate_accuracy(best.model, test, cfg.eval_steps(), cfg.eval_batch_size);
  log({{"iter", iter}, {"split", "test"}, {"accuracy", res.test_accuracy}, {"checkpoint_iter", res.best_iter}});
  return res;
}

/// The dataset a checkpoint was trained on: its data directory when it had
/// one, otherwise regenerated from the recorded task, seed and plan.
inline tasks::Dataset dataset_for_checkpoint(const LoadedCheckpoint& ck) {
  RunConfig cfg;
  cfg.task = tasks::task_from_string(ck.get("run.task"));
  cfg.seed = std::stoull(ck.get("run.seed"));
  cfg.plan = tasks::SplitPlan::defaults(cfg.task);
  for (const auto& [k, v] : ck.header)
    if (k.rfind("plan.", 0) == 0) cfg.plan.apply_override(k.substr(5), v);
  auto it = ck.header.find("run.data_dir");
  if (it != ck.header.end()) cfg.data_dir = it->second;
  return prepare_dataset(cfg);
}

/// Accuracy of a stored checkpoint on one split of a dataset.
inline double evaluate_checkpoint(const fs::path& checkpoint, const tasks::Dataset& ds, const std::string& split,
                                  std::optional<std::size_t> test_steps = std::nullopt, std::size_t batch_size = 256) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  check_vocab(ck, ds.vocab);
  const std::size_t steps = test_steps.value_or(ck.model.config().eval_steps());
  if (steps < ck.model.config().n_layers) throw std::invalid_argument("evaluate: test_steps below trained n_layers");
  return evaluate_accuracy(ck.model, encode_split(ds.split(split), ds.vocab), steps, batch_size);
}

}  // namespace ndr::harness
