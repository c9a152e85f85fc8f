#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "unlearn/autodiff.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/error.hpp"
#include "unlearn/format.hpp"
#include "unlearn/model.hpp"
#include "unlearn/rng.hpp"

// Partitioned contrastive gradient unlearning.
//
// Each 2-D weight matrix is cut into weight vectors (rows for input
// aggregation, columns for output aggregation). For a batch of contrastive
// pairs the gradients of the mean log-probability of the advantaged and of
// the disadvantaged completion are compared per weight vector by cosine
// similarity; the k fraction with the lowest similarity receives a plain
// first-order step.

namespace unlearn {

enum class Axis { input, output };
enum class Direction { decrease_advantaged, increase_disadvantaged };

inline const char* to_string(Axis a) { return a == Axis::input ? "input" : "output"; }
inline const char* to_string(Direction d) {
  return d == Direction::decrease_advantaged ? "decrease-advantaged" : "increase-disadvantaged";
}

inline Axis parse_axis(std::string_view s) {
  if (s == "input") return Axis::input;
  if (s == "output") return Axis::output;
  throw ConfigError("unknown axis '" + std::string(s) + "' (expected input|output)");
}

inline Direction parse_direction(std::string_view s) {
  if (s == "decrease-advantaged") return Direction::decrease_advantaged;
  if (s == "increase-disadvantaged") return Direction::increase_disadvantaged;
  throw ConfigError("unknown direction '" + std::string(s) + "' (expected decrease-advantaged|increase-disadvantaged)");
}

struct PartitionSpec {
  std::string param;
  Axis axis = Axis::input;
  std::size_t index = 0;

  // Spec order: parameter name, then index.
  friend auto operator<=>(const PartitionSpec& a, const PartitionSpec& b) {
    if (auto c = a.param <=> b.param; c != 0) return c;
    if (auto c = a.axis <=> b.axis; c != 0) return c;
    return a.index <=> b.index;
  }
  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

struct PartitionScore {
  PartitionSpec spec;
  double cosine = 1.0;
};

struct PCGUConfig {
  double k_fraction = 0.25;
  float alpha = 3e-3f;
  int epochs = 4;
  int batch_size = 16;
  Axis axis = Axis::input;
  Direction direction = Direction::decrease_advantaged;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(k_fraction >= 0.0 && k_fraction <= 1.0)) throw ConfigError("pcgu: k_fraction must lie in [0, 1]");
    if (!(alpha > 0.0f) || !std::isfinite(alpha)) throw ConfigError("pcgu: alpha must be positive");
    if (epochs < 0) throw ConfigError("pcgu: epochs must be non-negative");
    if (batch_size <= 0) throw ConfigError("pcgu: batch_size must be positive");
  }
};

template <typename T>
std::vector<PartitionSpec> partition_weights(const BasicParameterSet<T>& params, Axis axis) {
  std::vector<PartitionSpec> out;
  for (const auto& [name, t] : params.tensors) {
    if (t.rank() != 2) continue;
    const std::size_t n = axis == Axis::input ? t.rows() : t.cols();
    for (std::size_t i = 0; i < n; ++i) out.push_back({name, axis, i});
  }
  return out;
}

template <typename T>
struct ContrastiveGradients {
  BasicParameterSet<T> a1;  // ∇ mean log p(advantaged | prefix)
  BasicParameterSet<T> a2;  // ∇ mean log p(disadvantaged | prefix)
  double mean_adv_logprob = 0.0;
  double mean_dis_logprob = 0.0;
};

namespace detail {

// Gradient of the batch-mean log-probability of one side of the pairs.
template <typename T>
std::pair<BasicParameterSet<T>, double> mean_completion_gradient(const BasicParameterSet<T>& params,
                                                                 std::span<const ContrastivePair> batch,
                                                                 bool advantaged) {
  ad::Tape<T> tape;
  const auto w = bind(tape, params, true);
  const T inv = T(1) / static_cast<T>(batch.size());
  ad::Var<T> objective;
  for (const auto& p : batch) {
    const auto ls = next_token_log_probs(params.config, w, std::span<const TokenId>(p.prefix));
    const auto tok = advantaged ? p.advantaged : p.disadvantaged;
    if (tok < 0 || tok >= params.config.vocab_size) throw ConfigError("pcgu: completion id outside vocabulary");
    const auto term = ad::scale(ad::element(ls, 0, static_cast<std::size_t>(tok)), inv);
    objective = objective.valid() ? ad::add(objective, term) : term;
  }
  tape.backward(objective);
  BasicParameterSet<T> grads{params.config, {}};
  for (const auto& [name, v] : w) grads.tensors.emplace(name, tape.grad(v));
  return {std::move(grads), static_cast<double>(objective.value()[0])};
}

}  // namespace detail

template <typename T>
ContrastiveGradients<T> contrastive_gradients(const BasicParameterSet<T>& params,
                                              std::span<const ContrastivePair> batch) {
  if (batch.empty()) throw ConfigError("contrastive_gradients: empty batch");
  auto [g1, lp1] = detail::mean_completion_gradient(params, batch, true);
  auto [g2, lp2] = detail::mean_completion_gradient(params, batch, false);
  return {std::move(g1), std::move(g2), lp1, lp2};
}

// Copies the weight vector `spec` out of a tensor.
template <typename T>
std::vector<T> partition_slice(const BasicTensor<T>& t, const PartitionSpec& spec) {
  if (t.rank() != 2) throw DimensionError("partition '" + spec.param + "' is not a matrix");
  std::vector<T> out;
  if (spec.axis == Axis::input) {
    if (spec.index >= t.rows()) throw DimensionError("partition row out of range for '" + spec.param + "'");
    const auto r = t.row(spec.index);
    out.assign(r.begin(), r.end());
  } else {
    if (spec.index >= t.cols()) throw DimensionError("partition column out of range for '" + spec.param + "'");
    for (std::size_t r = 0; r < t.rows(); ++r) out.push_back(t.at(r, spec.index));
  }
  return out;
}

inline constexpr double kZeroNorm = 1e-12;

// Cosine of two gradient slices; +1 when either has (near) zero norm.
template <typename T>
double slice_cosine(std::span<const T> a, std::span<const T> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (std::sqrt(na) < kZeroNorm || std::sqrt(nb) < kZeroNorm) return 1.0;
  // sqrt(na·nb) rather than sqrt(na)·sqrt(nb): identical slices then give
  // exactly 1, since sqrt(fl(x·x)) == x.
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

template <typename T>
std::vector<PartitionScore> partition_cosine_scores(const BasicParameterSet<T>& grad_a1,
                                                    const BasicParameterSet<T>& grad_a2,
                                                    std::span<const PartitionSpec> specs) {
  std::vector<PartitionScore> out;
  out.reserve(specs.size());
  for (const auto& s : specs) {
    auto f1 = grad_a1.tensors.find(s.param);
    auto f2 = grad_a2.tensors.find(s.param);
    if (f1 == grad_a1.tensors.end() || f2 == grad_a2.tensors.end()) {
      throw ConfigError("partition_cosine_scores: no gradient for '" + s.param + "'");
    }
    const auto x = partition_slice(f1->second, s);
    const auto y = partition_slice(f2->second, s);
    out.push_back({s, slice_cosine<T>(x, y)});
  }
  return out;
}

// floor(k·m); the small epsilon keeps products such as 0.35·20 from landing
// just below an integer.
inline std::size_t selection_size(double k_fraction, std::size_t m) {
  if (!(k_fraction >= 0.0 && k_fraction <= 1.0)) throw ConfigError("select_bottom_k: k_fraction must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(k_fraction * static_cast<double>(m) + 1e-9));
  return std::min(k, m);
}

// The floor(k·m) lowest-cosine specs, ties broken by spec order. The result
// is sorted in spec order and depends only on the multiset of scores.
inline std::vector<PartitionSpec> select_bottom_k(std::span<const PartitionScore> scores, double k_fraction) {
  const std::size_t k = selection_size(k_fraction, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto less = [&](std::size_t a, std::size_t b) {
    if (scores[a].cosine != scores[b].cosine) return scores[a].cosine < scores[b].cosine;
    return scores[a].spec < scores[b].spec;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
  std::vector<PartitionSpec> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(scores[idx[i]].spec);
  std::sort(out.begin(), out.end());
  return out;
}

// In-place step on one weight vector of `w`.
template <typename T>
void update_partition(BasicTensor<T>& w, const BasicTensor<T>& grad, const PartitionSpec& spec, T alpha,
                      Direction direction) {
  detail::require_same_shape(w, grad, "apply_update");
  const T step = direction == Direction::decrease_advantaged ? -alpha : alpha;
  auto apply = [&](std::size_t i) { w[i] = w[i] + step * grad[i]; };
  if (spec.axis == Axis::input) {
    if (spec.index >= w.rows()) throw DimensionError("partition row out of range for '" + spec.param + "'");
    for (std::size_t c = 0; c < w.cols(); ++c) apply(spec.index * w.cols() + c);
  } else {
    if (spec.index >= w.cols()) throw DimensionError("partition column out of range for '" + spec.param + "'");
    for (std::size_t r = 0; r < w.rows(); ++r) apply(r * w.cols() + spec.index);
  }
}

// decrease-advantaged: θ ← θ − α·∇a1; increase-disadvantaged: θ ← θ + α·∇a2,
// on the selected weight vectors only.
template <typename T>
BasicParameterSet<T> apply_update(const BasicParameterSet<T>& params, const BasicParameterSet<T>& grad_a1,
                                  const BasicParameterSet<T>& grad_a2, std::span<const PartitionSpec> selected,
                                  T alpha, Direction direction) {
  BasicParameterSet<T> out = params;
  const auto& grads = direction == Direction::decrease_advantaged ? grad_a1 : grad_a2;
  for (const auto& s : selected) {
    auto it = out.tensors.find(s.param);
    auto git = grads.tensors.find(s.param);
    if (it == out.tensors.end() || git == grads.tensors.end()) {
      throw ConfigError("apply_update: unknown parameter '" + s.param + "'");
    }
    update_partition(it->second, git->second, s, alpha, direction);
  }
  return out;
}

struct PcguLogRow {
  int epoch = 0;
  int batch = 0;
  double mean_adv_logprob = 0.0;  // before the step
  double mean_cosine = 0.0;       // over all partitions
  std::size_t selected_count = 0;
};

struct PcguResult {
  ParameterSet params;
  std::vector<PcguLogRow> log;
  std::vector<std::vector<PartitionSpec>> selections;  // one per batch
};

// Pair indices per batch for one epoch: seeded shuffle, consecutive chunks.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline void validate_pairs(std::span<const ContrastivePair> pairs, const ModelConfig& c) {
  if (pairs.empty()) throw ConfigError("pcgu: no contrastive pairs");
  for (const auto& p : pairs) {
    if (p.prefix.empty()) throw FormatError("pcgu: pair with empty prefix");
    if (p.prefix.size() >= static_cast<std::size_t>(c.max_seq_len)) {
      throw ConfigError("pcgu: pair prefix does not fit the context window");
    }
  }
}

inline double mean_cosine(std::span<const PartitionScore> scores) {
  double s = 0.0;
  for (const auto& x : scores) s += x.cosine;
  return scores.empty() ? 1.0 : s / static_cast<double>(scores.size());
}

inline PcguResult run_pcgu(const ParameterSet& params, std::span<const ContrastivePair> pairs,
                           const PCGUConfig& cfg) {
  cfg.validate();
  params.validate();
  validate_pairs(pairs, params.config);
  PcguResult out{params, {}, {}};
  const auto specs = partition_weights(params, cfg.axis);
  Rng rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = epoch_batches(pairs.size(), cfg.batch_size, rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<ContrastivePair> batch;
      for (auto i : batches[b]) batch.push_back(pairs[i]);
      const auto g = contrastive_gradients(out.params, std::span<const ContrastivePair>(batch));
      const auto scores = partition_cosine_scores(g.a1, g.a2, std::span<const PartitionSpec>(specs));
      auto selected = select_bottom_k(scores, cfg.k_fraction);
      out.params = apply_update(out.params, g.a1, g.a2, std::span<const PartitionSpec>(selected), cfg.alpha,
                                cfg.direction);
      for (const auto& [name, t] : out.params.tensors) require_finite(t, ("pcgu update of " + name).c_str());
      out.log.push_back({epoch, static_cast<int>(b), g.mean_adv_logprob, mean_cosine(scores), selected.size()});
      out.selections.push_back(std::move(selected));
    }
  }
  return out;
}

inline std::string pcgu_log_csv(const std::vector<PcguLogRow>& rows) {
  std::string out = csv_row({"epoch", "batch", "mean_adv_logprob", "mean_cosine", "selected_count"});
  for (const auto& r : rows) {
    out += csv_row({std::to_string(r.epoch), std::to_string(r.batch), format_double(r.mean_adv_logprob),
                    format_double(r.mean_cosine), std::to_string(r.selected_count)});
  }
  return out;
}

// Mean log p(advantaged | prefix) over `pairs`.
template <typename T>
double mean_advantaged_logprob(const BasicParameterSet<T>& params, std::span<const ContrastivePair> pairs) {
  double s = 0.0;
  for (const auto& p : pairs) s += last_token_logprob(params, std::span<const TokenId>(p.prefix), p.advantaged);
  return s / static_cast<double>(pairs.size());
}

}  // namespace unlearn
