// ndr: data generation, training, evaluation, sweeps, traces and gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ndr/ndr.hpp"

namespace {

using namespace ndr;

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

tasks::Vocab vocab_of(const LoadedCheckpoint& ck) {
  return tasks::Vocab(split_words(ck.get("vocab.tokens")), split_words(ck.get("vocab.classes")));
}

std::vector<std::string> tokenize_input(tasks::Task task, const std::string& text) {
  switch (task) {
    case tasks::Task::arith: return tasks::arith_tokenize(text);
    case tasks::Task::listops: return tasks::listops_tokenize(text);
    default: return split_words(text);
  }
}

tasks::Dataset dataset_from(const LoadedCheckpoint& ck, const std::string& data_dir) {
  if (data_dir.empty()) return harness::dataset_for_checkpoint(ck);
  return tasks::load_dataset(data_dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ndr: training and analysis tools"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::simple);

  std::string task, out = "sweep", config, checkpoint, split = "test", data_dir, input, axis_text, module = "all";
  std::uint64_t seed = 0;
  unsigned workers = 1;
  std::vector<std::string> plan_kv, overrides;
  std::optional<std::size_t> test_steps;
  bool resume = false;

  auto* gen = app.add_subcommand("gen-data", "Generate task splits as JSONL plus a manifest");
  gen->add_option("--task", task, "ctl_fwd, ctl_bwd, arith or listops")->required();
  gen->add_option("--seed", seed)->required();
  gen->add_option("--out", out)->required();
  gen->add_option("--plan", plan_kv, "Split overrides such as train_depths=1-3 or test_size=500");
  gen->add_option("--workers", workers, "Generator threads; output does not depend on it");

  auto* tr = app.add_subcommand("train", "Train from a key=value config");
  tr->add_option("--config", config)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out)->required();
  tr->add_option("--override", overrides, "key=value, applied after the file");
  tr->add_flag("--resume", resume, "Continue from <out>/last.ckpt");

  auto* ev = app.add_subcommand("eval", "Accuracy of a checkpoint on one split");
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--split", split)->required();
  ev->add_option("--test-steps", test_steps);
  ev->add_option("--data", data_dir, "Dataset directory; default regenerates the training data");

  auto* sw = app.add_subcommand("sweep", "Train once per value of one config key");
  sw->add_option("--config", config)->required()->check(CLI::ExistingFile);
  sw->add_option("--axis", axis_text, "key=v1,v2,... or a predefined axis (act_weight, n_layers, readout)")->required();
  sw->add_option("--out", out, "Output root")->capture_default_str();
  sw->add_option("--override", overrides);

  auto* trc = app.add_subcommand("trace", "Export attention and gate traces of one input");
  trc->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  trc->add_option("--input", input, "Task tokens without begin/end markers")->required();
  trc->add_option("--out", out)->required();
  trc->add_option("--test-steps", test_steps);

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  gc->add_option("--module", module)->capture_default_str();

  auto* po = app.add_subcommand("ponder", "Mean halting step per sequence length of an ACT checkpoint");
  po->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  po->add_option("--split", split)->capture_default_str();
  po->add_option("--test-steps", test_steps);
  po->add_option("--data", data_dir);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const tasks::Task t = tasks::task_from_string(task);
      tasks::SplitPlan plan = tasks::SplitPlan::defaults(t);
      for (const auto& kv : plan_kv) {
        const auto [k, v] = harness::split_kv(kv);
        if (!plan.apply_override(k, v)) throw std::invalid_argument("unknown plan key " + k);
      }
      const tasks::Dataset ds = tasks::generate_dataset(t, plan, seed, workers);
      tasks::save_dataset(ds, out);
      for (const auto& s : plan.splits) std::cout << s.name << '\t' << ds.split(s.name).size() << '\n';
    } else if (*tr) {
      const harness::RunConfig cfg = harness::load_run_config(config, overrides);
      const tasks::Dataset ds = harness::prepare_dataset(cfg);
      const auto r = harness::train(cfg, ds, out, {resume, &std::cout});
      std::cout << "best_iter " << r.best_iter << " valid_ood " << r.best_ood << " test " << r.test_accuracy << '\n';
    } else if (*ev) {
      const LoadedCheckpoint ck = load_checkpoint(checkpoint);
      const tasks::Dataset ds = dataset_from(ck, data_dir);
      std::cout << harness::evaluate_checkpoint(checkpoint, ds, split, test_steps) << '\n';
    } else if (*sw) {
      const harness::RunConfig cfg = harness::load_run_config(config, overrides);
      const harness::SweepAxis axis = harness::parse_axis(axis_text);
      const auto rows = harness::sweep(cfg, axis, out, &std::cerr);
      const std::string table = harness::sweep_table(axis, rows);
      std::ofstream(std::filesystem::path(out) / "sweep.tsv") << table;
      std::cout << table;
    } else if (*trc) {
      const LoadedCheckpoint ck = load_checkpoint(checkpoint);
      const tasks::Vocab vocab = vocab_of(ck);
      const Trace t = capture(ck.model, vocab, tokenize_input(tasks::task_from_string(ck.get("run.task")), input),
                              test_steps);
      export_trace(t, out);
      std::cout << "prediction " << t.prediction << " steps " << t.attention.steps << '\n';
    } else if (*gc) {
      bool ok = true;
      for (const auto& [name, r] : grad_check_module(module)) {
        const bool pass = r.max_rel_error < 1e-3;
        ok = ok && pass;
        std::printf("%-22s %s  max_rel_error=%.3e  worst=%s  coords=%zu\n", name.c_str(), pass ? "ok  " : "FAIL",
                    r.max_rel_error, r.worst.c_str(), r.coordinates);
      }
      if (!ok) {
        std::cerr << "error: gradient check failed\n";
        return 1;
      }
    } else if (*po) {
      const LoadedCheckpoint ck = load_checkpoint(checkpoint);
      const tasks::Dataset ds = dataset_from(ck, data_dir);
      harness::check_vocab(ck, ds.vocab);
      std::cout << "length\tsequences\tmean_steps\tstd\n";
      for (const auto& r : ponder_report(ck.model, ds.vocab, ds.split(split), test_steps))
        std::cout << r.length << '\t' << r.sequences << '\t' << r.mean << '\t' << r.stddev << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
