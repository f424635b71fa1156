// Runs every acceptance criterion and prints one PASS/FAIL line for each.
//
//   acceptance --work DIR [--only 1,5,8]

#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ndr/ndr.hpp"
#include "oracles.hpp"

using namespace ndr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream notes;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template <class T>
std::vector<T> random_probs(std::size_t n, Rng& rng) {
  std::vector<T> p(n * n);
  for (auto& v : p) {
    const double u = rng.uniform();
    v = static_cast<T>(u < 0.1 ? 1e-8 : u < 0.2 ? 1.0 - 1e-8 : rng.uniform());
  }
  return p;
}

void geometric_identity(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng::stream(101, "accept/identity");
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    const auto p = random_probs<long double>(n, rng);
    const auto a = geometric_weights_log<long double>(p, n);
    for (std::size_t i = 0; i < n; ++i) {
      long double mass = 0, survive = 1;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) {
          mass += a[i * n + j];
          survive *= 1.0L - p[i * n + j];
        }
      worst = std::max(worst, static_cast<double>(std::fabs(mass + survive - 1.0L)));
    }
  }
  o.check(worst <= 1e-6, "mass + survival");
  double worst_log = 0;
  for (std::size_t n : {1, 2, 5, 17, 64, 128, 256}) {
    const auto p = random_probs<double>(n, rng);
    const auto ref = oracle::direct_product(std::vector<long double>(p.begin(), p.end()), n);
    const auto a = geometric_weights_log<double>(p, n);
    for (std::size_t k = 0; k < n * n; ++k) worst_log = std::max(worst_log, std::fabs(a[k] - static_cast<double>(ref[k])));
  }
  o.check(worst_log <= 1e-5, "log-space vs direct product");
  const double secs = seconds_since(t0);
  o.check(secs < 60, "runtime");
  o.notes << " identity_err=" << worst << " logspace_err=" << worst_log << " time=" << secs << "s";
}

void ordering(Outcome& o) {
  o.check(geometric_ordering(3, 5) == std::vector<std::size_t>{4, 2, 5, 1}, "geometric_ordering(3,5)");
  Rng rng = Rng::stream(102, "accept/shadow");
  std::size_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double p = rng.uniform();
    const std::vector<double> probs{0, p, 0, p, 0, p, 0, p, 0};
    const auto a = geometric_weights<double>(probs, 3);
    bad += a[1 * 3 + 2] != p || a[1 * 3 + 0] != p * (1 - p);
  }
  o.check(bad == 0, "two-neighbour shadowing");
  o.notes << " shadowing_mismatches=" << bad;
}

void gradients(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, GradCheckResult>> rs;
  for (const std::string v : {"baseline", "rel", "rel_gate", "absrel_gate", "geom", "ndr"})
    rs.emplace_back(v, layer_grad_check(v));
  rs.emplace_back("act_a", layer_grad_check("ndr", ActVariant::A));
  rs.emplace_back("act_u", layer_grad_check("ndr", ActVariant::U));
  for (const auto& [name, r] : rs) {
    o.check(r.max_rel_error < 1e-3, name);
    o.notes << ' ' << name << '=' << r.max_rel_error;
  }
  const double secs = seconds_since(t0);
  o.check(secs < 300, "runtime");
  o.notes << " time=" << secs << "s";
}

void copy_gate_exactness(Outcome& o) {
  for (const std::string v : {"rel_gate", "absrel_gate", "ndr"}) {
    const LayerVariant lv = LayerVariant::named(v);
    Rng rng = Rng::stream(104, "accept/gate");
    auto p = LayerParams<float>::init(LayerConfig{AttentionConfig{16, 2, lv.attention}, 32, lv, 0.0}, rng);
    for (auto& b : p.gate->b2.data_mut()) b = -std::numeric_limits<float>::infinity();
    Tensor<float> h(Shape{2, 7, 16});
    for (auto& x : h.data_mut()) x = static_cast<float>(rng.uniform(-3, 3));
    StepContext ctx;
    const auto out = layer_step(h, p, AttentionMask::from_lengths({7, 4}, 7), ctx);
    bool same = true;
    for (std::size_t k = 0; k < h.numel(); ++k) same = same && std::bit_cast<std::uint32_t>(out[k]) == std::bit_cast<std::uint32_t>(h[k]);
    o.check(same, v + " passthrough");
  }
  const double target = 1.0 / (1.0 + std::exp(3.0));
  const auto vocab = tasks::Vocab::for_task(tasks::Task::ctl_fwd);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.n_classes = vocab.n_classes();
  cfg.d_model = 64;
  cfg.d_ff = 128;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  const EncoderModel<float> model(cfg, Rng::stream(104, "accept/init"));
  tasks::SplitPlan plan = tasks::SplitPlan::defaults(tasks::Task::ctl_fwd);
  for (auto& s : plan.splits) s.size = 64;
  const auto ds = tasks::generate_dataset(tasks::Task::ctl_fwd, plan, 104);
  std::vector<std::vector<int>> ids;
  for (const auto& s : ds.split("valid_iid")) ids.push_back(vocab.encode(s.tokens));
  StepContext ctx;
  const auto res = model.forward(make_batch(ids, {}), 1, ctx, true);
  const Batch b = make_batch(ids, {});
  double sum = 0;
  std::size_t count = 0;
  const auto& g = res.trace.front().gate;
  const std::size_t d = g.size(-1);
  for (std::size_t r = 0; r < b.size; ++r)
    for (std::size_t i = 0; i < b.lengths[r]; ++i)
      for (std::size_t c = 0; c < d; ++c, ++count) sum += g[(r * b.length + i) * d + c];
  const double mean = sum / static_cast<double>(count);
  o.check(std::fabs(mean - target) <= 0.02, "fresh mean gate");
  o.notes << " fresh_mean_gate=" << mean;
}

void oracle_equivalence(Outcome& o) {
  using tasks::Task;
  o.check(tasks::listops_eval(tasks::listops_parse(tasks::listops_tokenize("[MED 4 8 5 [MAX 8 4 9]]"))) == 6,
          "[MED 4 8 5 [MAX 8 4 9]] -> 6");
  o.check(oracle::listops(tasks::listops_tokenize("[MED 4 8 5 [MAX 8 4 9]]")).value == 6, "oracle listops anchor");
  o.check(tasks::arith_eval(tasks::arith_tokenize("((4*7)+2)")) == 0, "((4*7)+2) -> 0");
  o.check(oracle::arith(tasks::arith_tokenize("((4*7)+2)")) == 0, "oracle arith anchor");
  for (auto task : {Task::ctl_fwd, Task::ctl_bwd, Task::arith, Task::listops}) {
    tasks::SplitPlan plan = tasks::SplitPlan::defaults(task);
    plan.at("train").size = 10000;
    const auto ds = tasks::generate_dataset(task, plan, 105);
    std::size_t bad = 0;
    for (const auto& s : ds.split("train")) {
      switch (task) {
        case Task::ctl_fwd:
        case Task::ctl_bwd: bad += oracle::ctl(s.tokens, ds.ctl->tables, task == Task::ctl_bwd) != s.target; break;
        case Task::arith: bad += std::to_string(oracle::arith(s.tokens)) != s.target; break;
        case Task::listops: {
          const auto r = oracle::listops(s.tokens);
          bad += std::to_string(r.value) != s.target || r.dep != s.dep_depth.value_or(-1);
          break;
        }
      }
    }
    o.check(bad == 0 && ds.split("train").size() == 10000, tasks::to_string(task));
    o.notes << ' ' << tasks::to_string(task) << "_mismatches=" << bad;
  }
}

std::pair<int, int> depth_range(const std::vector<tasks::Sample>& s, bool dep) {
  int lo = std::numeric_limits<int>::max(), hi = std::numeric_limits<int>::min();
  for (const auto& x : s) {
    const int d = dep ? x.dep_depth.value_or(-1) : x.depth;
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  return {lo, hi};
}

void split_integrity(Outcome& o) {
  using tasks::Task;
  const auto ctl = tasks::generate_dataset(Task::ctl_fwd, tasks::SplitPlan::defaults(Task::ctl_fwd), 106);
  o.check(ctl.split("train").size() == 53704, "CTL train size");
  o.check(depth_range(ctl.split("train"), false) == std::pair{1, 5}, "CTL train depths");
  o.check(depth_range(ctl.split("valid_ood"), false) == std::pair{6, 8}, "CTL OOD depths");
  o.check(depth_range(ctl.split("test"), false) == std::pair{9, 10}, "CTL test depths");
  o.notes << " ctl_train=" << ctl.split("train").size();
  for (auto task : {Task::arith, Task::listops}) {
    tasks::SplitPlan plan = tasks::SplitPlan::defaults(task);
    plan.at("train").size = 12000;
    const auto ds = tasks::generate_dataset(task, plan, 106);
    const bool dep = task == Task::listops;
    const std::string name = tasks::to_string(task);
    o.check(depth_range(ds.split("train"), dep) == std::pair{0, 5}, name + " train depths");
    o.check(depth_range(ds.split("valid_iid"), dep) == std::pair{0, 5}, name + " valid_iid depths");
    o.check(depth_range(ds.split("valid_ood"), dep) == std::pair{6, 6}, name + " OOD depths");
    o.check(depth_range(ds.split("test"), dep) == std::pair{7, 8}, name + " test depths");
    if (dep)
      for (const auto& [split, samples] : ds.splits) {
        std::map<int, std::size_t> c;
        for (const auto& s : samples) ++c[s.dep_depth.value_or(-1)];
        std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
        for (const auto& [d, n] : c) {
          lo = std::min(lo, n);
          hi = std::max(hi, n);
        }
        o.check(hi - lo <= 1, "listops balance in " + split);
        o.notes << " listops_" << split << "_spread=" << hi - lo;
      }
  }
}

void act_remainder(Outcome& o) {
  Rng rng = Rng::stream(107, "accept/act");
  double worst = 0;
  std::size_t early = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t_max = 2 + rng.below(20);
    std::vector<double> p(t_max);
    for (auto& v : p) v = rng.uniform(0.0, 0.6);
    const auto variant = trial % 2 ? ActVariant::A : ActVariant::U;
    const auto s = act_schedule(p, ActConfig{variant, t_max, 0.01, 0.03});
    if (s.steps < t_max) {
      ++early;
      double total = 0;
      for (double q : s.probs) total += q;
      worst = std::max(worst, std::fabs(total - 1.0));
    }
  }
  o.check(worst <= 1e-6, "remainder sums");
  o.check(early > 100, "enough early halts");

  const auto vocab = tasks::Vocab::for_task(tasks::Task::ctl_fwd);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.n_classes = vocab.n_classes();
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.n_layers = 6;
  cfg.act = ActConfig{ActVariant::A, 6, 0.01, 0.03};
  EncoderModel<float> model(cfg, Rng::stream(107, "accept/ponder"));
  Tensor<float> w = model.halting()->w_h, b = model.halting()->b_h;  // shared storage
  for (auto& v : w.data_mut()) v = 0;
  for (auto& v : b.data_mut()) v = 60.0f;
  tasks::SplitPlan plan = tasks::SplitPlan::defaults(tasks::Task::ctl_fwd);
  for (auto& s : plan.splits) s.size = 200;
  const auto ds = tasks::generate_dataset(tasks::Task::ctl_fwd, plan, 107);
  bool ones = true;
  for (const auto& r : ponder_report(model, vocab, ds.split("test"))) ones = ones && r.mean == 1.0 && r.stddev == 0.0;
  o.check(ones, "ponder_report of p_hat == 1");
  o.notes << " early_halts=" << early << " worst_sum_err=" << worst;
}

const char* kSmokeConfig =
    "task=ctl_fwd\nvariant=ndr\nd_model=64\nd_ff=128\nn_heads=2\nn_layers=6\nbatch_size=64\n"
    "lr=2e-3\ndropout=0.1\nweight_decay=0.01\nn_iters=5000\neval_every=250\nstop_iid_accuracy=0.95\n"
    "train_depths=1-3\ntrain_size=10000\nvalid_iid_depths=1-3\nvalid_ood_depths=4-5\ntest_depths=4-5\nseed=0\n";

void smoke_training(Outcome& o, const fs::path& work) {
  const auto cfg = harness::parse_run_config(kSmokeConfig);
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = harness::prepare_dataset(cfg);
  const auto res = harness::train(cfg, ds, work / "smoke");
  const double secs = seconds_since(t0);
  o.check(res.last_iid >= 0.95, "IID accuracy >= 0.95");
  o.check(res.iters_run <= 5000, "within 5K steps");
  o.check(secs <= 900, "within 15 minutes");
  o.notes << " iid=" << res.last_iid << " iters=" << res.iters_run << " time=" << secs << "s test=" << res.test_accuracy;
}

void determinism(Outcome& o, const fs::path& work) {
  const auto cfg = harness::parse_run_config(
      "task=ctl_fwd\nd_model=32\nd_ff=64\nn_heads=2\nn_layers=4\nbatch_size=32\nlr=1e-3\ndropout=0.1\n"
      "n_iters=60\neval_every=20\nseed=9\ntrain_depths=1-3\ntrain_size=2000\nvalid_iid_size=200\n"
      "valid_ood_depths=4-5\nvalid_ood_size=200\ntest_depths=4-5\ntest_size=200\n");
  const auto ds = harness::prepare_dataset(cfg);
  harness::train(cfg, ds, work / "det_a");
  harness::train(cfg, ds, work / "det_b");
  const std::string la = slurp(work / "det_a" / "metrics.jsonl");
  o.check(!la.empty() && la == slurp(work / "det_b" / "metrics.jsonl"), "identical metric logs");

  const auto ck = load_checkpoint(work / "det_a" / "last.ckpt");
  save_checkpoint(work / "det_a" / "resaved.ckpt", ck.model, ck.optimizer, ck.header);
  o.check(slurp(work / "det_a" / "resaved.ckpt") == slurp(work / "det_a" / "last.ckpt"), "checkpoint bytes");
  const auto back = load_checkpoint(work / "det_a" / "resaved.ckpt");
  const auto pa = ck.model.parameters(), pb = back.model.parameters();
  bool same = pa.size() == pb.size();
  for (std::size_t i = 0; same && i < pa.size(); ++i) {
    const auto a = pa[i].tensor.data(), b = pb[i].tensor.data();
    same = a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
             return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
           });
  }
  o.check(same, "parameters after reload");
  o.notes << " log_bytes=" << la.size();
}

void trace_fidelity(Outcome& o, const fs::path& work) {
  const auto vocab = tasks::Vocab::for_task(tasks::Task::ctl_fwd);
  const std::vector<std::string> input{"011", "c", "h", "a", "e"};
  for (const std::string v : {"baseline", "rel_gate", "geom", "ndr"}) {
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.n_classes = vocab.n_classes();
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.n_heads = 2;
    cfg.n_layers = 5;
    cfg.variant = v;
    const EncoderModel<float> model(cfg, Rng::stream(110, "accept/trace"));
    StepContext ctx;
    const auto plain = model.forward(make_batch({vocab.encode(input)}, {}), 5, ctx);
    const Trace tr = capture(model, vocab, input);
    bool same = tr.logits.size() == plain.logits.numel();
    for (std::size_t k = 0; same && k < tr.logits.size(); ++k)
      same = std::bit_cast<std::uint32_t>(tr.logits[k]) == std::bit_cast<std::uint32_t>(plain.logits[k]);
    o.check(same, v + " logits unchanged");

    const fs::path dir = work / ("trace_" + v);
    export_trace(tr, dir);
    const Trace back = load_trace(dir / "trace.json");
    o.check(trace_to_json(back).dump() == trace_to_json(tr).dump() && back.attention.weights == tr.attention.weights &&
                back.logits == tr.logits,
            v + " JSON round trip");
    const std::size_t n = tr.tokens.size();
    bool sizes = true;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".pgm" && e.path().filename() != "gates.pgm") {
        const auto img = read_pgm(e.path());
        sizes = sizes && img.width == n && img.height == n && img.pixels.size() == n * n;
      }
    o.check(sizes, v + " heatmap sizes");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory for training runs and traces");
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path wdir(work);
  fs::remove_all(wdir);
  fs::create_directories(wdir);
  struct Criterion {
    std::string name;
    std::function<void(Outcome&)> run;
  };
  const std::vector<Criterion> criteria{
      {"geometric attention identity", geometric_identity},
      {"ordering and tie-break", ordering},
      {"gradient checks", gradients},
      {"copy-gate exactness", copy_gate_exactness},
      {"oracle equivalence", oracle_equivalence},
      {"split integrity", split_integrity},
      {"ACT remainder property", act_remainder},
      {"smoke training", [&](Outcome& o) { smoke_training(o, wdir); }},
      {"determinism", [&](Outcome& o) { determinism(o, wdir); }},
      {"trace fidelity", [&](Outcome& o) { trace_fidelity(o, wdir); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      criteria[k].run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.notes << " [exception: " << e.what() << "]";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << ' ' << criteria[k].name << " |" << o.notes.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
