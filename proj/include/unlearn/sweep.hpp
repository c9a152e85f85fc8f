#pragma once

#include <algorithm>
#include <chrono>
#include <span>
#include <string>
#include <vector>

#include "unlearn/eval.hpp"
#include "unlearn/format.hpp"
#include "unlearn/pcgu.hpp"
#include "unlearn/shard.hpp"
#include "unlearn/task_vector.hpp"

// k / lambda ablations. Every knob value starts again from the base weights,
// so rows are independent of grid order.

namespace unlearn {

struct SweepRow {
  std::string method;  // "pcgu" | "tv"
  double knob = 0.0;
  double bias_score = 0.0;
  double delta = 0.0;
  double perplexity = 0.0;
  double mc_accuracy = 0.0;
  double runtime_seconds = 0.0;
  std::uint64_t seed = 0;
};

// Sorted copy; duplicates and values outside [lo, hi] are rejected.
inline std::vector<double> normalize_grid(std::vector<double> grid, double lo, double hi, const char* what) {
  if (grid.empty()) throw ConfigError(std::string(what) + ": empty grid");
  for (double v : grid) {
    if (!(v >= lo && v <= hi)) {
      throw ConfigError(std::string(what) + ": value " + format_double(v) + " outside [" + format_double(lo) + ", " +
                        format_double(hi) + "]");
    }
  }
  std::sort(grid.begin(), grid.end());
  if (std::adjacent_find(grid.begin(), grid.end()) != grid.end()) {
    throw ConfigError(std::string(what) + ": duplicate grid value");
  }
  return grid;
}

namespace detail {

inline SweepRow make_row(const char* method, double knob, const EvalReport& r, double seconds, std::uint64_t seed) {
  return {method, knob, r.bias_score, r.delta, r.perplexity, r.mc_accuracy, seconds, seed};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// One row per lambda: evaluate(pre − lambda·tau).
inline std::vector<SweepRow> sweep_tv(const ParameterSet& base, const TaskVector& tv, std::span<const double> lambdas,
                                      const EvalSets& sets, std::uint64_t seed = 0) {
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto params = apply_task_vector(base, tv, lambda, true);
    const auto report = evaluate(params, sets);
    rows.push_back(detail::make_row("tv", lambda, report, detail::seconds_since(t0), seed));
  }
  return rows;
}

// One row per k: run_pcgu (or its sharded form) from the base weights, then
// evaluate.
inline std::vector<SweepRow> sweep_pcgu(const ParameterSet& base, std::span<const ContrastivePair> pairs,
                                        std::span<const double> ks, const PCGUConfig& cfg, const EvalSets& sets,
                                        int n_shards = 1) {
  std::vector<SweepRow> rows;
  for (double k : ks) {
    const auto t0 = std::chrono::steady_clock::now();
    PCGUConfig c = cfg;
    c.k_fraction = k;
    const auto params =
        n_shards > 1 ? run_pcgu_sharded(base, pairs, c, n_shards).params : run_pcgu(base, pairs, c).params;
    const auto report = evaluate(params, sets);
    rows.push_back(detail::make_row("pcgu", k, report, detail::seconds_since(t0), cfg.seed));
  }
  return rows;
}

// Wall-clock time is not reproducible, so runtime_seconds is written as 0
// unless asked for.
inline std::string sweep_csv(const std::vector<SweepRow>& rows, bool record_runtime) {
  std::string out =
      csv_row({"method", "knob", "bias_score", "delta", "perplexity", "mc_accuracy", "runtime_seconds", "seed"});
  for (const auto& r : rows) {
    out += csv_row({r.method, format_double(r.knob), format_double(r.bias_score), format_double(r.delta),
                    format_double(r.perplexity), format_double(r.mc_accuracy),
                    format_double(record_runtime ? r.runtime_seconds : 0.0), std::to_string(r.seed)});
  }
  return out;
}

}  // namespace unlearn
