#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/error.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

inline constexpr double kScoreTieTolerance = 1e-9;

// 1 if the stereotyped sentence is more likely, 0.5 on a tie, 0 otherwise.
inline double pair_preference(double stereo_logprob, double anti_logprob) {
  if (std::abs(stereo_logprob - anti_logprob) <= kScoreTieTolerance) return 0.5;
  return stereo_logprob > anti_logprob ? 1.0 : 0.0;
}

struct CategoryScore {
  double bias_score = 0.0;
  std::size_t count = 0;
};

struct BiasScore {
  double bias_score = 0.0;
  std::map<std::string, CategoryScore> per_category;
  std::size_t n_pairs = 0;
  std::size_t ties = 0;
};

template <typename T>
BiasScore crows_bias_score(const BasicParameterSet<T>& params, std::span<const BiasEvalPair> pairs) {
  if (pairs.empty()) throw ConfigError("crows_bias_score: empty pair list");
  BiasScore out;
  double total = 0.0;
  std::map<std::string, double> sums;
  for (const auto& p : pairs) {
    const double s = pair_preference(sequence_logprob(params, std::span<const TokenId>(p.stereo)),
                                     sequence_logprob(params, std::span<const TokenId>(p.anti)));
    if (s == 0.5) ++out.ties;
    total += s;
    sums[p.category] += s;
    ++out.per_category[p.category].count;
  }
  out.n_pairs = pairs.size();
  out.bias_score = total / static_cast<double>(pairs.size());
  for (auto& [cat, cs] : out.per_category) cs.bias_score = sums[cat] / static_cast<double>(cs.count);
  return out;
}

// Σ log p(continuation[i] | prefix, continuation[<i]).
template <typename T>
double continuation_logprob(const BasicParameterSet<T>& params, std::span<const TokenId> prefix,
                            std::span<const TokenId> continuation) {
  if (prefix.empty()) throw ConfigError("continuation_logprob: empty prefix");
  Tokens full(prefix.begin(), prefix.end());
  full.insert(full.end(), continuation.begin(), continuation.end());
  const auto ls = log_softmax_rows(forward(params, std::span<const TokenId>(full)));
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::size_t pos = prefix.size() + i;
    total += static_cast<double>(ls.at(pos - 1, static_cast<std::size_t>(full[pos])));
  }
  return total;
}

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t n_tokens = 0;
};

// Documents are full token sequences ([bos] + words + [eos]); each is scored
// with its own context, and one longer than the context window is split into
// windows overlapping by one token.
template <typename T>
PerplexityResult perplexity(const BasicParameterSet<T>& params, const std::vector<Tokens>& documents) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& doc : documents) {
    for (const auto& w : windows(doc, static_cast<std::size_t>(params.config.max_seq_len))) {
      if (w.size() < 2) continue;
      nll -= sequence_logprob(params, std::span<const TokenId>(w));
      n += w.size() - 1;
    }
  }
  if (n == 0) throw ConfigError("perplexity: corpus yields no predicted tokens");
  PerplexityResult out;
  out.n_tokens = n;
  out.mean_nll = nll / static_cast<double>(n);
  out.perplexity = std::exp(out.mean_nll);
  return out;
}

// Choice scored by mean per-token log-probability given the prompt; ties go
// to the lowest index.
template <typename T>
int mc_predict(const BasicParameterSet<T>& params, const McItem& item) {
  if (item.choices.size() < 2) throw FormatError("mc_accuracy: item needs at least 2 choices");
  int best = -1;
  double best_score = 0.0;
  for (std::size_t c = 0; c < item.choices.size(); ++c) {
    const auto& choice = item.choices[c];
    if (choice.empty()) throw FormatError("mc_accuracy: empty choice");
    const double s = continuation_logprob(params, std::span<const TokenId>(item.prompt),
                                          std::span<const TokenId>(choice)) /
                     static_cast<double>(choice.size());
    if (best < 0 || s > best_score) {
      best = static_cast<int>(c);
      best_score = s;
    }
  }
  return best;
}

template <typename T>
double mc_accuracy(const BasicParameterSet<T>& params, std::span<const McItem> items) {
  if (items.empty()) throw ConfigError("mc_accuracy: empty item list");
  std::size_t correct = 0;
  for (const auto& item : items) {
    if (item.answer_index < 0 || static_cast<std::size_t>(item.answer_index) >= item.choices.size()) {
      throw FormatError("mc_accuracy: answer_index out of range");
    }
    if (mc_predict(params, item) == item.answer_index) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

struct EvalSets {
  std::vector<BiasEvalPair> pairs;
  std::vector<Tokens> ppl_documents;
  std::vector<McItem> mc_items;
};

struct EvalReport {
  double bias_score = 0.0;
  double delta = 0.0;
  std::map<std::string, CategoryScore> per_category;
  std::size_t ties = 0;
  double perplexity = 0.0;
  double mc_accuracy = 0.0;
  std::size_t n_pairs = 0;
  std::size_t n_ppl_tokens = 0;
  std::size_t n_mc = 0;
};

inline EvalReport evaluate(const ParameterSet& params, const EvalSets& sets) {
  EvalReport r;
  const auto bias = crows_bias_score(params, std::span<const BiasEvalPair>(sets.pairs));
  r.bias_score = bias.bias_score;
  r.delta = std::abs(bias.bias_score - 0.5);
  r.per_category = bias.per_category;
  r.ties = bias.ties;
  r.n_pairs = bias.n_pairs;
  const auto ppl = perplexity(params, sets.ppl_documents);
  r.perplexity = ppl.perplexity;
  r.n_ppl_tokens = ppl.n_tokens;
  r.mc_accuracy = mc_accuracy(params, std::span<const McItem>(sets.mc_items));
  r.n_mc = sets.mc_items.size();
  return r;
}

// FNV-1a 64 over the compact JSON text, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json report_to_json(const EvalReport& r, const std::string& checkpoint_path,
                                     const nlohmann::json& config) {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [name, cs] : r.per_category) cats[name] = {{"bias_score", cs.bias_score}, {"count", cs.count}};
  return {{"bias_score", r.bias_score},
          {"delta", r.delta},
          {"per_category", cats},
          {"ties", r.ties},
          {"perplexity", r.perplexity},
          {"mc_accuracy", r.mc_accuracy},
          {"n_pairs", r.n_pairs},
          {"n_ppl_tokens", r.n_ppl_tokens},
          {"n_mc", r.n_mc},
          {"checkpoint", checkpoint_path},
          {"config", config},
          {"config_hash", config_hash(config)}};
}

}  // namespace unlearn
