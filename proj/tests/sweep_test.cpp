#include <gtest/gtest.h>

#include "support/toy.hpp"
#include "unlearn/sweep.hpp"

namespace unlearn {
namespace {

using testing::toy_model;
using testing::toy_pairs;

EvalSets toy_sets(const ModelConfig& c) {
  EvalSets s;
  Rng rng(1);
  auto seq = [&](std::size_t n) {
    Tokens t{Vocab::kBos};
    while (t.size() < n) t.push_back(static_cast<TokenId>(4 + rng.below(static_cast<std::uint64_t>(c.vocab_size - 4))));
    return t;
  };
  for (int i = 0; i < 20; ++i) s.pairs.push_back({seq(6), seq(6), i % 2 ? "gender" : "nationality"});
  for (int i = 0; i < 5; ++i) s.ppl_documents.push_back(seq(8));
  for (int i = 0; i < 4; ++i) s.mc_items.push_back({seq(4), {{5}, {6}, {7}}, i % 3});
  return s;
}

void expect_same_values(const SweepRow& a, const SweepRow& b) {
  EXPECT_EQ(a.method, b.method);
  EXPECT_EQ(a.knob, b.knob);
  EXPECT_EQ(a.bias_score, b.bias_score);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_EQ(a.perplexity, b.perplexity);
  EXPECT_EQ(a.mc_accuracy, b.mc_accuracy);
}

TEST(SweepGrid, SortsAndRejects) {
  EXPECT_EQ(normalize_grid({0.4, 0.2, 0.3}, 0, 1, "k"), (std::vector<double>{0.2, 0.3, 0.4}));
  EXPECT_THROW(normalize_grid({0.2, 0.2}, 0, 1, "k"), ConfigError);
  EXPECT_THROW(normalize_grid({1.5}, 0, 1, "k"), ConfigError);
  EXPECT_THROW(normalize_grid({}, 0, 1, "k"), ConfigError);
}

TEST(SweepPcgu, RowsIndependentOfGridOrder) {
  const auto base = toy_model(1);
  const auto pairs = toy_pairs(base.config, 8, 2);
  const auto sets = toy_sets(base.config);
  PCGUConfig cfg;
  cfg.alpha = 5e-2f;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  const std::vector<double> ks{0.2, 0.25, 0.3, 0.35, 0.4};
  const std::vector<double> permuted{0.35, 0.2, 0.4, 0.3, 0.25};
  const auto a = sweep_pcgu(base, std::span<const ContrastivePair>(pairs), ks, cfg, sets);
  const auto b = sweep_pcgu(base, std::span<const ContrastivePair>(pairs), permuted, cfg, sets);
  ASSERT_EQ(a.size(), 5u);
  for (const auto& row : b) {
    auto it = std::find_if(a.begin(), a.end(), [&](const auto& r) { return r.knob == row.knob; });
    ASSERT_NE(it, a.end());
    expect_same_values(*it, row);
  }
}

TEST(SweepPcgu, ZeroKRowEqualsBaseEval) {
  const auto base = toy_model(3);
  const auto pairs = toy_pairs(base.config, 4, 3);
  const auto sets = toy_sets(base.config);
  const std::vector<double> ks{0.0};
  const auto rows = sweep_pcgu(base, std::span<const ContrastivePair>(pairs), ks, PCGUConfig{}, sets);
  const auto r = evaluate(base, sets);
  expect_same_values(rows[0], {"pcgu", 0.0, r.bias_score, r.delta, r.perplexity, r.mc_accuracy, 0, 0});
}

TEST(SweepPcgu, ShardedRowsMatch) {
  const auto base = toy_model(4);
  const auto pairs = toy_pairs(base.config, 6, 4);
  const auto sets = toy_sets(base.config);
  PCGUConfig cfg;
  cfg.alpha = 5e-2f;
  cfg.epochs = 1;
  cfg.batch_size = 3;
  const std::vector<double> ks{0.3};
  const auto a = sweep_pcgu(base, std::span<const ContrastivePair>(pairs), ks, cfg, sets, 1);
  const auto b = sweep_pcgu(base, std::span<const ContrastivePair>(pairs), ks, cfg, sets, 3);
  expect_same_values(a[0], b[0]);
}

TEST(SweepTv, LambdaZeroEqualsBaseAndOrderIndependent) {
  const auto base = toy_model(5);
  auto ft = base;
  Rng rng(6);
  for (auto& [_, t] : ft.tensors)
    for (auto& v : t.data()) v += static_cast<float>(rng.normal() * 0.1);
  const auto tv = compute_task_vector(base, ft);
  const auto sets = toy_sets(base.config);
  const std::vector<double> grid{0, 0.2, 0.4, 0.6, 0.8, 1.0};
  const auto rows = sweep_tv(base, tv, grid, sets, 7);
  ASSERT_EQ(rows.size(), 6u);
  const auto r = evaluate(base, sets);
  expect_same_values(rows[0], {"tv", 0.0, r.bias_score, r.delta, r.perplexity, r.mc_accuracy, 0, 7});
  std::vector<double> rev(grid.rbegin(), grid.rend());
  const auto back = sweep_tv(base, tv, rev, sets, 7);
  for (std::size_t i = 0; i < rows.size(); ++i) expect_same_values(rows[i], back[rows.size() - 1 - i]);
}

TEST(SweepCsv, FixedColumnsAndRuntimeSuppression) {
  const std::vector<SweepRow> rows{{"tv", 0.2, 0.75, 0.25, 3.5, 1, 12.5, 0}};
  EXPECT_EQ(sweep_csv(rows, false),
            "method,knob,bias_score,delta,perplexity,mc_accuracy,runtime_seconds,seed\n"
            "tv,0.2,0.75,0.25,3.5,1,0,0\n");
  EXPECT_NE(sweep_csv(rows, true).find(",12.5,"), std::string::npos);
}

}  // namespace
}  // namespace unlearn
