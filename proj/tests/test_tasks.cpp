#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ndr/tasks/dataset.hpp"
#include "oracles.hpp"

using namespace ndr;
using namespace ndr::tasks;

namespace {

SplitPlan sized(Task task, std::size_t train) {
  SplitPlan p = SplitPlan::defaults(task);
  p.at("train").size = train;
  return p;
}

std::map<int, std::size_t> count_by(const std::vector<Sample>& s, bool dep) {
  std::map<int, std::size_t> c;
  for (const auto& x : s) ++c[dep ? x.dep_depth.value() : x.depth];
  return c;
}

}  // namespace

TEST(TaskAnchors, LiteralExamples) {
  EXPECT_EQ(listops_eval(listops_parse(listops_tokenize("[MED 4 8 5 [MAX 8 4 9]]"))), 6);
  EXPECT_EQ(oracle::listops(listops_tokenize("[MED 4 8 5 [MAX 8 4 9]]")).value, 6);
  EXPECT_EQ(arith_eval(arith_tokenize("((4*7)+2)")), 0);
  EXPECT_EQ(oracle::arith(arith_tokenize("((4*7)+2)")), 0);
}

TEST(TaskAnchors, ListOpsTieRuleUsesShallowestArgument) {
  // MAX of 7 and [SM 3 4] = 7: the bare digit decides, so depth 1.
  EXPECT_EQ(dependency_depth(listops_parse(listops_tokenize("[MAX 7 [SM 3 4]]"))), 1);
  EXPECT_EQ(dependency_depth(listops_parse(listops_tokenize("[MAX 2 [SM 3 4]]"))), 2);
  EXPECT_EQ(dependency_depth(listops_parse(listops_tokenize("[MIN 2 [MAX 1 2]]"))), 1);
  EXPECT_EQ(dependency_depth(listops_parse(listops_tokenize("[MED 1 [SM 5 0] 9]"))), 2);
  EXPECT_EQ(oracle::listops(listops_tokenize("[MAX 7 [SM 3 4]]")).dep, 1);
}

TEST(TaskParsers, RejectMalformedInput) {
  EXPECT_THROW(arith_eval(arith_tokenize("(4*7")), ArithParseError);
  EXPECT_THROW(arith_eval(arith_tokenize("4+7")), ArithParseError);
  EXPECT_THROW(listops_parse(listops_tokenize("[MED 4 8")), ListOpsParseError);
  EXPECT_THROW(listops_parse(listops_tokenize("[AVG 4 8]")), ListOpsParseError);
}

TEST(OracleEquivalence, ArithmeticTenThousandSamples) {
  const auto ds = generate_dataset(Task::arith, sized(Task::arith, 10000), 11);
  std::size_t mismatches = 0;
  for (const auto& s : ds.split("train")) {
    mismatches += std::to_string(oracle::arith(s.tokens)) != s.target;
    EXPECT_LE(s.tokens.size(), kMaxTokens);
  }
  EXPECT_EQ(ds.split("train").size(), 10000u);
  EXPECT_EQ(mismatches, 0u);
}

TEST(OracleEquivalence, ListOpsTenThousandSamples) {
  const auto ds = generate_dataset(Task::listops, sized(Task::listops, 10000), 12);
  std::size_t mismatches = 0;
  for (const auto& s : ds.split("train")) {
    const auto r = oracle::listops(s.tokens);
    mismatches += std::to_string(r.value) != s.target || r.dep != s.dep_depth.value();
    EXPECT_LE(s.tokens.size(), kMaxTokens);
  }
  EXPECT_EQ(ds.split("train").size(), 10000u);
  EXPECT_EQ(mismatches, 0u);
}

TEST(OracleEquivalence, CtlBothDirections) {
  for (auto task : {Task::ctl_fwd, Task::ctl_bwd}) {
    SplitPlan plan = SplitPlan::defaults(task);
    plan.at("train").size = 10000;
    const auto ds = generate_dataset(task, plan, 13);
    ASSERT_TRUE(ds.ctl.has_value());
    EXPECT_TRUE(ds.ctl->is_bijective());
    std::size_t mismatches = 0;
    for (const auto& s : ds.split("train")) mismatches += oracle::ctl(s.tokens, ds.ctl->tables, task == Task::ctl_bwd) != s.target;
    EXPECT_EQ(mismatches, 0u);
  }
}

TEST(SplitIntegrity, CtlDefaultPlan) {
  const auto ds = generate_dataset(Task::ctl_fwd, SplitPlan::defaults(Task::ctl_fwd), 1);
  const auto& train = ds.split("train");
  EXPECT_EQ(train.size(), 53704u);
  auto range = [](const std::vector<Sample>& s) {
    const auto c = count_by(s, false);
    return std::pair{c.begin()->first, c.rbegin()->first};
  };
  EXPECT_EQ(range(train), (std::pair{1, 5}));
  EXPECT_EQ(range(ds.split("valid_iid")), (std::pair{1, 5}));
  EXPECT_EQ(range(ds.split("valid_ood")), (std::pair{6, 8}));
  EXPECT_EQ(range(ds.split("test")), (std::pair{9, 10}));
  for (const auto& s : train) EXPECT_EQ(static_cast<int>(s.tokens.size()), s.depth + 1);
  // every unit pair is in train
  std::set<std::vector<std::string>> units;
  for (const auto& s : train)
    if (s.depth == 1) units.insert(s.tokens);
  EXPECT_EQ(units.size(), 72u);
}

TEST(SplitIntegrity, ArithmeticAndListOpsDepthRanges) {
  for (auto task : {Task::arith, Task::listops}) {
    SplitPlan plan = SplitPlan::defaults(task);
    plan.at("train").size = 3000;
    const auto ds = generate_dataset(task, plan, 2);
    const bool dep = task == Task::listops;
    auto keys = [&](const std::string& split) {
      std::vector<int> k;
      for (const auto& [d, n] : count_by(ds.split(split), dep)) k.push_back(d);
      return k;
    };
    EXPECT_EQ(keys("train"), (std::vector<int>{0, 1, 2, 3, 4, 5}));
    EXPECT_EQ(keys("valid_iid"), (std::vector<int>{0, 1, 2, 3, 4, 5}));
    EXPECT_EQ(keys("valid_ood"), (std::vector<int>{6}));
    EXPECT_EQ(keys("test"), (std::vector<int>{7, 8}));
  }
}

TEST(SplitIntegrity, ListOpsBalancedAcrossDependencyDepths) {
  SplitPlan plan = SplitPlan::defaults(Task::listops);
  plan.at("train").size = 6001;
  plan.at("test").size = 999;
  const auto ds = generate_dataset(Task::listops, plan, 3);
  for (const auto& name : SplitPlan::names()) {
    const auto c = count_by(ds.split(name), true);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& [d, n] : c) {
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    EXPECT_LE(hi - lo, 1u) << name;
    EXPECT_EQ(ds.split(name).size(), plan.at(name).size) << name;
  }
}

TEST(Generation, IndependentOfWorkerCount) {
  SplitPlan plan = SplitPlan::defaults(Task::listops);
  plan.at("train").size = 4500;
  const auto one = generate_dataset(Task::listops, plan, 4, 1);
  const auto four = generate_dataset(Task::listops, plan, 4, 4);
  EXPECT_EQ(one.splits, four.splits);
  const auto other = generate_dataset(Task::listops, plan, 5, 1);
  EXPECT_NE(one.split("train"), other.split("train"));
}

TEST(Generation, BackwardCtlReversesForward) {
  SplitPlan plan = SplitPlan::defaults(Task::ctl_fwd);
  plan.at("train").size = 2000;
  const auto fwd = generate_dataset(Task::ctl_fwd, plan, 6);
  const auto bwd = generate_dataset(Task::ctl_bwd, plan, 6);
  ASSERT_EQ(fwd.split("test").size(), bwd.split("test").size());
  for (std::size_t i = 0; i < fwd.split("test").size(); ++i)
    EXPECT_EQ(ctl_reverse(fwd.split("test")[i]), bwd.split("test")[i]);
}

TEST(Generation, SamplesEncodeWithTaskVocab) {
  for (auto task : {Task::ctl_fwd, Task::arith, Task::listops}) {
    SplitPlan plan = SplitPlan::defaults(task);
    plan.at("train").size = 500;
    const auto ds = generate_dataset(task, plan, 7);
    for (const auto& [name, samples] : ds.splits)
      for (const auto& s : samples) {
        const auto ids = ds.vocab.encode(s.tokens);
        EXPECT_EQ(ids.size(), s.tokens.size() + 2);
        EXPECT_NO_THROW(ds.vocab.class_id(s.target));
      }
  }
}

TEST(SplitPlanOverrides, ParseDepthsAndSizes) {
  SplitPlan p = SplitPlan::defaults(Task::ctl_fwd);
  EXPECT_TRUE(p.apply_override("train_depths", "1-3"));
  EXPECT_TRUE(p.apply_override("test_size", "77"));
  EXPECT_TRUE(p.apply_override("valid_ood_depths", "4"));
  EXPECT_FALSE(p.apply_override("lr", "1"));
  EXPECT_EQ(p.at("train").max_depth, 3);
  EXPECT_EQ(p.at("valid_ood").min_depth, 4);
  EXPECT_EQ(p.at("valid_ood").max_depth, 4);
  EXPECT_EQ(p.at("test").size, 77u);
  EXPECT_THROW(p.apply_override("train_depths", "5-2"), std::invalid_argument);
  EXPECT_EQ(depth_quotas({"x", 1, 3, 11}), (std::vector<std::size_t>{4, 4, 3}));
}

TEST(Serialization, JsonlAndManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ndr_test_tasks_roundtrip";
  std::filesystem::remove_all(dir);
  for (auto task : {Task::ctl_bwd, Task::listops}) {
    SplitPlan plan = SplitPlan::defaults(task);
    plan.at("train").size = 300;
    plan.at("test").size = 20;
    const auto ds = generate_dataset(task, plan, 8);
    save_dataset(ds, dir);
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.task, ds.task);
    EXPECT_EQ(back.seed, ds.seed);
    EXPECT_EQ(back.plan, ds.plan);
    EXPECT_EQ(back.ctl, ds.ctl);
    EXPECT_EQ(back.vocab, ds.vocab);
    EXPECT_EQ(back.splits, ds.splits);
  }
  std::filesystem::remove_all(dir);
}

TEST(Vocab, RejectsUnknownTokens) {
  const Vocab v = Vocab::for_task(Task::arith);
  EXPECT_EQ(v.token_id(Vocab::kPad), 0);
  EXPECT_THROW(v.token_id("MED"), std::out_of_range);
  EXPECT_THROW(v.encode({}), std::invalid_argument);
  EXPECT_EQ(Vocab::for_task(Task::ctl_fwd).n_classes(), 8u);
  EXPECT_EQ(Vocab::symbol_name(5), "101");
}
