// Acceptance run: one PASS/FAIL line per criterion with the measured value,
// its limit and the wall-clock time. Exit status is nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/toy.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/pcgu.hpp"
#include "unlearn/shard.hpp"
#include "unlearn/sweep.hpp"
#include "unlearn/synth.hpp"
#include "unlearn/task_vector.hpp"
#include "unlearn/train.hpp"

#ifndef UNLEARN_CLI
#error "UNLEARN_CLI must name the command-line binary"
#endif

namespace fs = std::filesystem;
using namespace unlearn;
using unlearn::testing::check_gradients;
using unlearn::testing::random_tensor;
using unlearn::testing::toy_config;
using unlearn::testing::toy_model;
using unlearn::testing::toy_pairs;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail, double seconds, double limit_seconds) {
  const bool in_time = limit_seconds <= 0 || seconds < limit_seconds;
  const bool pass = ok && in_time;
  if (!pass) ++failures;
  std::printf("criterion %d %s %s: %s; %.1f s", id, pass ? "PASS" : "FAIL", name, detail.c_str(), seconds);
  if (limit_seconds > 0) std::printf(" (limit %.0f s)", limit_seconds);
  std::printf("\n");
  std::fflush(stdout);
}

double max_abs_diff(const ParameterSet& a, const ParameterSet& b) {
  double worst = 0;
  for (const auto& [name, t] : a.tensors) {
    const auto& u = b.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, std::abs(double(t[i]) - double(u[i])));
  }
  return worst;
}

// --- 1. gradient correctness ---

void criterion_gradients() {
  constexpr double kTol = 1e-3;
  const auto t0 = Clock::now();
  Rng rng(2024);
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
  std::map<std::string, double> worst;
  auto check = [&](const std::string& name, const std::vector<Tensor>& in, auto expr) {
    worst[name] = std::max(worst[name], check_gradients(in, expr).worst());
  };
  const std::vector<std::int32_t> ids{2, 0, 2, 4};
  const std::vector<std::int32_t> targets{1, 3, 0};
  check("matmul", {r({3, 4}), r({4, 2})}, [](auto&, const auto& v) { return ad::matmul(v[0], v[1]); });
  check("matmul_nt", {r({3, 4}), r({5, 4})}, [](auto&, const auto& v) { return ad::matmul_nt(v[0], v[1]); });
  check("transpose", {r({3, 4})}, [](auto&, const auto& v) { return ad::transpose(v[0]); });
  check("add", {r({3, 4}), r({3, 4})}, [](auto&, const auto& v) { return ad::add(v[0], v[1]); });
  check("sub", {r({3, 4}), r({3, 4})}, [](auto&, const auto& v) { return ad::sub(v[0], v[1]); });
  check("mul", {r({3, 4}), r({3, 4})}, [](auto&, const auto& v) { return ad::mul(v[0], v[1]); });
  check("scale", {r({3, 4})}, [](auto&, const auto& v) {
    using T = typename std::decay_t<decltype(v[0].value())>::value_type;
    return ad::scale(v[0], T(-1.7));
  });
  check("add_row", {r({3, 4}), r({4})}, [](auto&, const auto& v) { return ad::add_row(v[0], v[1]); });
  check("gelu", {r({3, 4})}, [](auto&, const auto& v) { return ad::gelu(v[0]); });
  check("layer_norm", {r({3, 4}), r({4}), r({4})},
        [](auto&, const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  check("embedding", {r({5, 4})}, [&ids](auto&, const auto& v) { return ad::embedding(v[0], ids); });
  check("slice_cols", {r({3, 4})}, [](auto&, const auto& v) { return ad::slice_cols(v[0], 1, 3); });
  check("slice_rows", {r({3, 4})}, [](auto&, const auto& v) { return ad::slice_rows(v[0], 1, 3); });
  check("concat_cols", {r({3, 4}), r({3, 2})}, [](auto&, const auto& v) {
    using V = std::decay_t<decltype(v[0])>;
    std::vector<V> parts{v[0], v[1], v[0]};
    return ad::concat_cols<typename std::decay_t<decltype(v[0].value())>::value_type>(parts);
  });
  check("softmax_rows", {r({3, 4})}, [](auto&, const auto& v) { return ad::softmax_rows(v[0]); });
  check("causal_softmax_rows", {r({3, 3})}, [](auto&, const auto& v) { return ad::causal_softmax_rows(v[0]); });
  check("log_softmax_rows", {r({3, 4})}, [](auto&, const auto& v) { return ad::log_softmax_rows(v[0]); });
  check("cross_entropy", {r({3, 4})}, [&targets](auto&, const auto& v) { return ad::cross_entropy(v[0], targets); });
  check("sum", {r({3, 4})}, [](auto&, const auto& v) { return ad::sum(v[0]); });
  check("mean", {r({3, 4})}, [](auto&, const auto& v) { return ad::mean(v[0]); });
  check("element", {r({3, 4})}, [](auto&, const auto& v) { return ad::element(v[0], 2, 1); });
  check("reshape", {r({3, 4})}, [](auto&, const auto& v) { return ad::reshape(v[0], Shape{4, 3}); });

  // End to end: contrastive gradients of the toy model against central
  // differences of a double copy.
  const auto p = toy_model(3);
  const auto batch = toy_pairs(p.config, 3, 5);
  const auto g = contrastive_gradients(p, std::span<const ContrastivePair>(batch));
  auto pd = p.cast<double>();
  const double h = 1e-3;
  auto side = [&](bool adv) {
    double s = 0;
    for (const auto& x : batch)
      s += last_token_logprob(pd, std::span<const TokenId>(x.prefix), adv ? x.advantaged : x.disadvantaged);
    return s / static_cast<double>(batch.size());
  };
  for (bool adv : {true, false}) {
    const auto& grads = adv ? g.a1 : g.a2;
    for (auto& [name, t] : pd.tensors) {
      BasicTensor<double> numeric(t.shape());
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double orig = t[i];
        t[i] = orig + h;
        const double up = side(adv);
        t[i] = orig - h;
        const double down = side(adv);
        t[i] = orig;
        numeric[i] = (up - down) / (2 * h);
      }
      auto& w = worst[std::string("contrastive ") + (adv ? "a1" : "a2")];
      w = std::max(w, unlearn::testing::relative_error(grads.at(name), numeric));
    }
  }

  std::string worst_name;
  double worst_value = 0;
  for (const auto& [name, v] : worst)
    if (v >= worst_value) worst_value = v, worst_name = name;
  report(1, "gradient correctness", worst_value < kTol,
         std::to_string(worst.size()) + " checks, worst relative error " + fmt(worst_value) + " (" + worst_name +
             ") < " + fmt(kTol),
         seconds_since(t0), 60);
}

// --- 2. task-vector algebra ---

ParameterSet perturbed(const ParameterSet& p, std::uint64_t seed, double scale) {
  auto out = p;
  Rng rng(seed);
  for (auto& [_, t] : out.tensors)
    for (auto& v : t.data()) v += static_cast<float>(rng.normal() * scale);
  return out;
}

void criterion_task_vector_algebra() {
  const auto t0 = Clock::now();
  const auto pre = toy_model(21);
  // A dense perturbation and a real low-rank fine-tune.
  std::vector<ParameterSet> finetuned{perturbed(pre, 22, 0.05)};
  {
    std::vector<Tokens> corpus;
    Rng rng(23);
    for (int i = 0; i < 8; ++i) {
      Tokens s{Vocab::kBos};
      for (int j = 0; j < 6; ++j) s.push_back(static_cast<TokenId>(4 + rng.below(28)));
      s.push_back(Vocab::kEos);
      corpus.push_back(std::move(s));
    }
    FinetuneConfig fc;
    fc.steps = 20;
    fc.learning_rate = 1e-2f;
    finetuned.push_back(finetune_lm(pre, corpus, fc).params);
  }
  bool zero_ok = true, neg_ok = true;
  double worst_recon = 0, worst_linear = 0;
  for (const auto& ft : finetuned) {
    const auto tv = compute_task_vector(pre, ft);
    for (bool neg : {false, true}) zero_ok = zero_ok && bit_identical(apply_task_vector(pre, tv, 0.0, neg), pre);
    const auto rec = apply_task_vector(pre, tv, 1.0, false);
    for (const auto& [name, t] : ft.tensors) {
      const auto& u = rec.at(name);
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const double d = std::abs(double(u[i]) - double(t[i]));
        if (d > 0) worst_recon = std::max(worst_recon, d / std::abs(double(t[i])));
      }
    }
    for (double lambda : {0.2, 0.6, 1.0, 1.7}) {
      neg_ok = neg_ok && bit_identical(apply_task_vector(pre, tv, lambda, true),
                                       apply_task_vector(pre, scale(tv, -1.0f), lambda, false));
    }
    Rng rng(24);
    for (int trial = 0; trial < 20; ++trial) {
      const double l1 = rng.uniform(), l2 = rng.uniform();
      worst_linear = std::max(worst_linear, max_abs_diff(apply_task_vector(pre, tv, l1 + l2, false),
                                                         apply_task_vector(apply_task_vector(pre, tv, l1, false),
                                                                           tv, l2, false)));
    }
  }
  const bool ok = zero_ok && neg_ok && worst_recon <= 1e-6 && worst_linear <= 1e-6;
  report(2, "task-vector algebra", ok,
         std::string("lambda=0 bit-identical ") + (zero_ok ? "yes" : "no") + ", negation == scale(-1) " +
             (neg_ok ? "yes" : "no") + ", reconstruction rel err " + fmt(worst_recon) + " <= 1e-6, linearity abs err " +
             fmt(worst_linear) + " <= 1e-6",
         seconds_since(t0), 10);
}

// --- 3. PCGU masking ---

// Replays run_pcgu step by step and checks every intermediate state.
void criterion_masking() {
  const auto t0 = Clock::now();
  const auto p = toy_model(31);
  const auto pairs = toy_pairs(p.config, 12, 32);
  bool ok = true;
  std::size_t steps = 0;
  std::string why;
  for (Axis axis : {Axis::input, Axis::output}) {
    for (double k : {0.0, 0.1, 0.25, 0.4, 1.0}) {
      PCGUConfig cfg;
      cfg.k_fraction = k;
      cfg.alpha = 5e-2f;
      cfg.epochs = 2;
      cfg.batch_size = 4;
      cfg.axis = axis;
      const auto specs = partition_weights(p, axis);
      const std::size_t m = specs.size();
      const auto expected_k = static_cast<std::size_t>(std::floor(k * static_cast<double>(m) + 1e-9));
      auto cur = p;
      Rng rng(cfg.seed);
      for (int e = 0; e < cfg.epochs; ++e) {
        for (const auto& idx : epoch_batches(pairs.size(), cfg.batch_size, rng)) {
          std::vector<ContrastivePair> batch;
          for (auto i : idx) batch.push_back(pairs[i]);
          const auto g = contrastive_gradients(cur, std::span<const ContrastivePair>(batch));
          const auto scores = partition_cosine_scores(g.a1, g.a2, std::span<const PartitionSpec>(specs));
          const auto sel = select_bottom_k(scores, k);
          const auto next = apply_update(cur, g.a1, g.a2, std::span<const PartitionSpec>(sel), cfg.alpha, cfg.direction);
          ++steps;
          if (sel.size() != expected_k) ok = false, why = "selection size";
          std::set<PartitionSpec> chosen(sel.begin(), sel.end());
          for (const auto& s : specs) {
            if (chosen.count(s)) continue;
            if (partition_slice(next.at(s.param), s) != partition_slice(cur.at(s.param), s)) {
              ok = false, why = "unselected partition changed";
            }
          }
          for (const auto& [name, t] : cur.tensors)
            if (t.rank() != 2 && !bit_identical(t, next.at(name))) ok = false, why = "vector parameter changed";
          cur = next;
        }
      }
      const auto ref = run_pcgu(p, std::span<const ContrastivePair>(pairs), cfg);
      if (!bit_identical(ref.params, cur)) ok = false, why = "replay differs from run_pcgu";
      if (k == 0.0 && !bit_identical(ref.params, p)) ok = false, why = "k=0 changed weights";
    }
  }
  report(3, "PCGU masking", ok,
         std::to_string(steps) + " steps checked: k=0 bit-identical, unselected slices bit-identical, |selection| == "
                                 "floor(k*m)" +
             (ok ? "" : "; violated: " + why),
         seconds_since(t0), 30);
}

// --- 4. shard equivalence ---

void criterion_shards() {
  const auto t0 = Clock::now();
  const auto p = toy_model(41);
  const auto pairs = toy_pairs(p.config, 12, 42);
  bool same_sel = true;
  double worst = 0;
  for (Axis axis : {Axis::input, Axis::output}) {
    PCGUConfig cfg;
    cfg.alpha = 5e-2f;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.k_fraction = 0.3;
    cfg.axis = axis;
    const auto ref = run_pcgu(p, std::span<const ContrastivePair>(pairs), cfg);
    for (int n : {1, 2, 4}) {
      const auto res = run_pcgu_sharded(p, std::span<const ContrastivePair>(pairs), cfg, n);
      same_sel = same_sel && res.selections == ref.selections;
      worst = std::max(worst, max_abs_diff(res.params, ref.params));
    }
  }
  report(4, "shard equivalence", same_sel && worst <= 1e-6,
         std::string("1/2/4 shards, selections identical ") + (same_sel ? "yes" : "no") + ", max |dw| " + fmt(worst) +
             " <= 1e-6",
         seconds_since(t0), 120);
}

// --- shared synthetic pipeline for 5, 6, 7 ---

struct Pipeline {
  SynthBenchmark bench;
  Vocab vocab;
  ParameterSet base;
  EvalSets sets;
  std::vector<ContrastivePair> pairs;
  double train_seconds = 0;
};

Pipeline build_pipeline() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.rho = 0.9;
  sc.seed = 0;
  auto bench = gen_synthetic_benchmark(sc);
  auto vocab = bench.vocab();
  ModelConfig mc;
  mc.vocab_size = static_cast<int>(vocab.size());
  TrainConfig tc;
  tc.steps = 2000;
  tc.learning_rate = 1e-3f;
  tc.batch_size = 16;
  auto base =
      train_lm(init_model(mc), training_sequences(bench.pretrain, vocab, std::size_t(mc.max_seq_len)), tc).params;
  EvalSets sets{encode_bias_eval(bench.eval_pairs, vocab), training_sequences(bench.heldout, vocab, 1 << 30),
                encode_mc(bench.mc_items, vocab)};
  auto pairs = make_contrastive_pairs(bench.qa_records, vocab);
  Pipeline pl{std::move(bench), std::move(vocab), std::move(base), std::move(sets), std::move(pairs), 0};
  pl.train_seconds = seconds_since(t0);
  std::fprintf(stderr, "base model trained in %.1f s\n", pl.train_seconds);
  return pl;
}

// --- 5. descent ---

void criterion_descent(const Pipeline& pl) {
  const auto t0 = Clock::now();
  PCGUConfig cfg;
  cfg.alpha = 1e-3f;
  cfg.direction = Direction::decrease_advantaged;
  Rng rng(cfg.seed);
  const auto idx = epoch_batches(pl.pairs.size(), cfg.batch_size, rng).front();
  std::vector<ContrastivePair> batch;
  for (auto i : idx) batch.push_back(pl.pairs[i]);
  const std::span<const ContrastivePair> b(batch);
  const auto g = contrastive_gradients(pl.base, b);
  const auto specs = partition_weights(pl.base, cfg.axis);
  const auto scores = partition_cosine_scores(g.a1, g.a2, std::span<const PartitionSpec>(specs));
  const auto sel = select_bottom_k(scores, cfg.k_fraction);
  const auto after = apply_update(pl.base, g.a1, g.a2, std::span<const PartitionSpec>(sel), cfg.alpha, cfg.direction);
  const double before_lp = mean_advantaged_logprob(pl.base, b);
  const double after_lp = mean_advantaged_logprob(after, b);
  report(5, "descent", after_lp < before_lp,
         "batch-mean advantaged logprob " + fmt(before_lp) + " -> " + fmt(after_lp) + " (must decrease)",
         seconds_since(t0), 30);
}

// --- 6. task-vector trend ---

void criterion_tv_trend(const Pipeline& pl) {
  const auto t0 = Clock::now();
  const auto base_report = evaluate(pl.base, pl.sets);
  const auto ft = finetune_lm(pl.base, training_sequences(pl.bench.biased_corpus(), pl.vocab, 128), FinetuneConfig{});
  const auto tv = compute_task_vector(pl.base, ft.params);
  const std::vector<double> lambdas{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  const auto rows = sweep_tv(pl.base, tv, lambdas, pl.sets, 0);
  std::string curve;
  int inversions = 0;
  double worst_inversion = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    curve += (i ? " " : "") + fmt(rows[i].bias_score);
    if (i > 0 && rows[i].bias_score > rows[i - 1].bias_score) {
      ++inversions;
      worst_inversion = std::max(worst_inversion, rows[i].bias_score - rows[i - 1].bias_score);
    }
  }
  const double b0 = rows.front().bias_score, b1 = rows.back().bias_score;
  const double ppl0 = rows[0].perplexity, ppl06 = rows[3].perplexity;
  const bool ok = base_report.bias_score >= 0.8 && b1 <= b0 - 0.10 && inversions <= 1 && worst_inversion <= 0.02 &&
                  ppl06 <= 1.2 * ppl0;
  report(6, "task-vector trend", ok,
         "base bias " + fmt(base_report.bias_score) + " >= 0.8; bias over lambda 0..1: " + curve + "; drop " +
             fmt(b0 - b1) + " >= 0.1; inversions " + std::to_string(inversions) + " (max " + fmt(worst_inversion) +
             ") <= 1 of <= 0.02; ppl(0.6) " + fmt(ppl06) + " <= 1.2 x " + fmt(ppl0),
         pl.train_seconds + seconds_since(t0), 900);
}

// --- 7. PCGU effect ---

void criterion_pcgu_effect(const Pipeline& pl) {
  const auto t0 = Clock::now();
  const double base_bias = evaluate(pl.base, pl.sets).bias_score;
  const std::vector<double> ks{0.2, 0.25, 0.3, 0.35, 0.4};
  const auto rows = sweep_pcgu(pl.base, std::span<const ContrastivePair>(pl.pairs), ks, PCGUConfig{}, pl.sets);
  const auto best = *std::min_element(rows.begin(), rows.end(),
                                      [](const auto& a, const auto& b) { return a.bias_score < b.bias_score; });
  std::string curve;
  for (const auto& r : rows) curve += (curve.empty() ? "" : " ") + fmt(r.knob) + ":" + fmt(r.bias_score);
  report(7, "PCGU effect", base_bias - best.bias_score >= 0.05,
         "base bias " + fmt(base_bias) + ", k:bias " + curve + "; best k " + fmt(best.knob) + " reduction " +
             fmt(base_bias - best.bias_score) + " >= 0.05",
         pl.train_seconds + seconds_since(t0), 900);
}

// --- 8. scorer oracles ---

// Brute force on a double copy: one forward pass per prefix, normalizer
// summed here.
double stepwise_logprob(const BasicParameterSet<double>& p, const Tokens& prefix, TokenId next) {
  const auto logits = forward(p, std::span<const TokenId>(prefix));
  const std::size_t last = logits.rows() - 1;
  double mx = -1e300;
  for (std::size_t v = 0; v < logits.cols(); ++v) mx = std::max(mx, logits.at(last, v));
  double z = 0;
  for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits.at(last, v) - mx);
  return logits.at(last, static_cast<std::size_t>(next)) - mx - std::log(z);
}

double stepwise_sequence(const BasicParameterSet<double>& p, const Tokens& seq) {
  double s = 0;
  for (std::size_t t = 1; t < seq.size(); ++t) s += stepwise_logprob(p, Tokens(seq.begin(), seq.begin() + t), seq[t]);
  return s;
}

Tokens random_seq(Rng& rng, std::size_t n, int vocab) {
  Tokens s{Vocab::kBos};
  while (s.size() < n) s.push_back(static_cast<TokenId>(4 + rng.below(static_cast<std::uint64_t>(vocab - 4))));
  return s;
}

void criterion_scorers() {
  const auto t0 = Clock::now();
  const auto p = toy_model(81);
  const auto pd = p.cast<double>();
  Rng rng(82);
  // Bias score against brute force.
  std::vector<BiasEvalPair> pairs;
  double expected = 0, worst_lp = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t len = 5 + rng.below(6);
    BiasEvalPair bp{random_seq(rng, len, p.config.vocab_size), random_seq(rng, len, p.config.vocab_size), "gender"};
    const double s = stepwise_sequence(pd, bp.stereo), a = stepwise_sequence(pd, bp.anti);
    worst_lp = std::max(worst_lp, std::abs(sequence_logprob(pd, std::span<const TokenId>(bp.stereo)) - s));
    expected += std::abs(s - a) <= kScoreTieTolerance ? 0.5 : (s > a ? 1.0 : 0.0);
    pairs.push_back(std::move(bp));
  }
  const double bias_err =
      std::abs(crows_bias_score(p, std::span<const BiasEvalPair>(pairs)).bias_score - expected / 20.0);
  // Perplexity against brute force.
  std::vector<Tokens> docs;
  double nll = 0;
  std::size_t n = 0;
  for (std::size_t len = 5; len <= 10; ++len) {
    docs.push_back(random_seq(rng, len, p.config.vocab_size));
    nll -= stepwise_sequence(pd, docs.back());
    n += len - 1;
  }
  const auto ppl = perplexity(p, docs);
  const double oracle_ppl = std::exp(nll / double(n));
  const double ppl_err = std::abs(ppl.perplexity - oracle_ppl) / oracle_ppl;
  // Swap symmetry.
  std::size_t asym = 0;
  std::vector<BiasEvalPair> all, swapped;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t len = 3 + rng.below(6);
    BiasEvalPair bp{random_seq(rng, len, p.config.vocab_size), random_seq(rng, len, p.config.vocab_size), "race-color"};
    if (i % 97 == 0) bp.anti = bp.stereo;
    BiasEvalPair sw{bp.anti, bp.stereo, bp.category};
    const auto s = crows_bias_score(p, std::span<const BiasEvalPair>(&bp, 1)).bias_score;
    const auto t = crows_bias_score(p, std::span<const BiasEvalPair>(&sw, 1)).bias_score;
    if (s != 1.0 - t) ++asym;
    all.push_back(std::move(bp));
    swapped.push_back(std::move(sw));
  }
  const double total_a = crows_bias_score(p, std::span<const BiasEvalPair>(all)).bias_score;
  const double total_b = crows_bias_score(p, std::span<const BiasEvalPair>(swapped)).bias_score;
  // Preference sums are half-integers; compare them rather than the ratios,
  // whose final division by n rounds independently.
  const double half_a = std::round(total_a * 2000.0), half_b = std::round(total_b * 2000.0);
  const bool aggregate_symmetric = half_a + half_b == 2000.0;
  const bool ok = worst_lp <= 1e-6 && bias_err <= 1e-6 && ppl_err <= 1e-6 && asym == 0 && aggregate_symmetric;
  report(8, "scorer oracles", ok,
         "sequence logprob err " + fmt(worst_lp) + ", bias score err " + fmt(bias_err) + ", perplexity rel err " +
             fmt(ppl_err) + " (all <= 1e-6); swap asymmetries " + std::to_string(asym) +
             "/1000 == 0, aggregate " + fmt(total_a) + " + " + fmt(total_b) + " == 1",
         seconds_since(t0), 0);
}

// --- 9. CLI determinism ---

std::string slurp(const fs::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

void criterion_cli_determinism() {
  const auto t0 = Clock::now();
  const fs::path work = fs::temp_directory_path() / "unlearn_acceptance_cli";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string cli = UNLEARN_CLI;
  const std::string d = work.string();
  const std::string syn = d + "/syn";
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-synth", "gen-synth --out " + syn +
                        " --seed 0 --rho 0.9 --n-declarative 300 --n-facts 60 --n-questions 60 --n-heldout 30 "
                        "--n-qa 24 --n-stereoset 24 --n-comments 24"},
      {"build-vocab", "build-vocab --corpus " + syn + "/pretrain.txt " + syn + "/heldout.txt --out " + d + "/vocab2.txt"},
      {"make-pairs", "make-pairs --input " + syn + "/qa.jsonl --vocab " + syn + "/vocab.txt --out " + d + "/pairs.jsonl"},
      {"build-bias-corpus", "build-bias-corpus --stereoset " + syn + "/stereoset.jsonl --comments " + syn +
                                "/comments.jsonl --out " + d + "/biased.txt"},
      {"train-base", "train-base --corpus " + syn + "/pretrain.txt --vocab " + syn + "/vocab.txt --out " + d +
                         "/base.ulkt --steps 10 --batch-size 4 --layers 1 --heads 2 --d-model 16 --d-ff 32"},
      {"finetune", "finetune --base " + d + "/base.ulkt --corpus " + d + "/biased.txt --vocab " + syn +
                       "/vocab.txt --out " + d + "/ft.ulkt --steps 4 --batch-size 2 --grad-accum 2"},
      {"tv extract", "tv extract --base " + d + "/base.ulkt --finetuned " + d + "/ft.ulkt --out " + d + "/tau.ulkt"},
      {"tv apply",
       "tv apply --base " + d + "/base.ulkt --tv " + d + "/tau.ulkt --lambda 0.5 --negate --out " + d + "/neg.ulkt"},
      {"pcgu", "pcgu --base " + d + "/base.ulkt --pairs " + d + "/pairs.jsonl --vocab " + syn + "/vocab.txt --out " +
                   d + "/pcgu.ulkt --epochs 1 --batch-size 8"},
      {"pcgu --shards --log", "pcgu --base " + d + "/base.ulkt --pairs " + d + "/pairs.jsonl --vocab " + syn +
                                  "/vocab.txt --out " + d + "/pcgu2.ulkt --log " + d +
                                  "/pcgu2.csv --epochs 1 --batch-size 8 --shards 2"},
      {"eval", "eval --checkpoint " + d + "/pcgu.ulkt --vocab " + syn + "/vocab.txt --eval-pairs " + syn +
                   "/eval_pairs.jsonl --ppl-corpus " + syn + "/heldout.txt --mc " + syn + "/mc.jsonl --out " + d +
                   "/report.json"},
      {"generate", "generate --checkpoint " + d + "/base.ulkt --vocab " + syn +
                       "/vocab.txt --prompt \"the nurse\" --max-new 6 --temperature 0.8 --seed 3 --out " + d +
                       "/gen.txt"},
      {"sweep-tv", "sweep-tv --base " + d + "/base.ulkt --finetuned " + d + "/ft.ulkt --vocab " + syn +
                       "/vocab.txt --lambdas 0,0.5,1 --eval-pairs " + syn + "/eval_pairs.jsonl --ppl-corpus " + syn +
                       "/heldout.txt --mc " + syn + "/mc.jsonl --out " + d + "/sweep_tv.csv"},
      {"sweep-pcgu", "sweep-pcgu --base " + d + "/base.ulkt --pairs " + d + "/pairs.jsonl --vocab " + syn +
                         "/vocab.txt --ks 0.2,0.4 --epochs 1 --batch-size 8 --eval-pairs " + syn +
                         "/eval_pairs.jsonl --ppl-corpus " + syn + "/heldout.txt --mc " + syn + "/mc.jsonl --out " +
                         d + "/sweep_pcgu.csv"},
  };
  std::vector<std::string> differing;
  std::size_t checked = 0;
  for (const auto& [name, args] : commands) {
    std::map<std::string, std::string> runs[2];
    for (auto& run : runs) {
      const std::string cmd = "\"" + cli + "\" " + args + " > \"" + d + "/stdout.txt\" 2> \"" + d + "/stderr.txt\"";
      if (std::system(cmd.c_str()) != 0) {
        differing.push_back(name + " (nonzero exit: " + slurp(work / "stderr.txt") + ")");
        break;
      }
      run = snapshot(work);
    }
    if (runs[0] != runs[1]) {
      for (const auto& [file, bytes] : runs[0]) {
        auto it = runs[1].find(file);
        if (it == runs[1].end() || it->second != bytes) differing.push_back(name + ": " + file);
      }
    }
    checked += runs[1].size();
  }
  std::string detail = std::to_string(commands.size()) + " commands run twice";
  detail += differing.empty() ? ", all outputs byte-identical" : ", differing:";
  for (const auto& s : differing) detail += " [" + s + "]";
  report(9, "CLI determinism", differing.empty(), detail, seconds_since(t0), 0);
  fs::remove_all(work);
}

// Runs `f`; an escaping exception counts as a failure of criterion `id`.
void guarded(int id, const char* name, const std::function<void()>& f) {
  const auto t0 = Clock::now();
  try {
    f();
  } catch (const std::exception& e) {
    report(id, name, false, std::string("threw: ") + e.what(), seconds_since(t0), 0);
  }
}

}  // namespace

int main() {
  guarded(1, "gradient correctness", criterion_gradients);
  guarded(2, "task-vector algebra", criterion_task_vector_algebra);
  guarded(3, "PCGU masking", criterion_masking);
  guarded(4, "shard equivalence", criterion_shards);
  std::optional<Pipeline> pl;
  try {
    pl = build_pipeline();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "base model pipeline failed: %s\n", e.what());
  }
  if (pl) {
    guarded(5, "descent", [&] { criterion_descent(*pl); });
    guarded(6, "task-vector trend", [&] { criterion_tv_trend(*pl); });
    guarded(7, "PCGU effect", [&] { criterion_pcgu_effect(*pl); });
  } else {
    for (int id : {5, 6, 7}) report(id, "synthetic pipeline", false, "base model unavailable", 0, 0);
  }
  guarded(8, "scorer oracles", criterion_scorers);
  guarded(9, "CLI determinism", criterion_cli_determinism);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
