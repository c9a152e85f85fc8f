#pragma once

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "unlearn/error.hpp"
#include "unlearn/format.hpp"
#include "unlearn/pcgu.hpp"

// Sharded PCGU. Every 2-D parameter is owned by one worker. Per batch:
//
//   1. the coordinator broadcasts a snapshot of the weights and the batch;
//      each worker runs the full forward/backward and scores the weight
//      vectors of the parameters it owns
//   2. workers send (spec, cosine) lists to the coordinator
//   3. the coordinator selects the global bottom-k and broadcasts it
//   4. workers update their own parameters and send them back
//
// Workers are threads that exchange messages by value over channels; each
// phase is a barrier at the coordinator.

namespace unlearn {

struct ShardPlan {
  int n_shards = 1;
  std::map<std::string, int> assignment;  // 2-D parameter name → shard id

  std::vector<std::string> owned_by(int shard) const {
    std::vector<std::string> out;
    for (const auto& [name, s] : assignment)
      if (s == shard) out.push_back(name);
    return out;
  }
};

// Round-robin over 2-D parameter names in lexicographic order.
template <typename T>
ShardPlan plan_shards(const BasicParameterSet<T>& params, int n_shards) {
  if (n_shards < 1) throw ConfigError("plan_shards: n_shards must be at least 1");
  ShardPlan plan;
  plan.n_shards = n_shards;
  int next = 0;
  for (const auto& [name, t] : params.tensors) {
    if (t.rank() != 2) continue;
    plan.assignment.emplace(name, next);
    next = (next + 1) % n_shards;
  }
  return plan;
}

// Blocking FIFO. close() wakes every receiver; receive() then drains what is
// left and returns nullopt.
template <typename M>
class Channel {
 public:
  void send(M msg) {
    {
      std::lock_guard lock(mu_);
      if (closed_) return;
      queue_.push_back(std::move(msg));
    }
    cv_.notify_one();
  }

  std::optional<M> receive() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) return std::nullopt;
    M msg = std::move(queue_.front());
    queue_.pop_front();
    return msg;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<M> queue_;
  bool closed_ = false;
};

enum class ShardPhase { score, select, update };

inline const char* to_string(ShardPhase p) {
  switch (p) {
    case ShardPhase::score: return "score";
    case ShardPhase::select: return "select";
    case ShardPhase::update: return "update";
  }
  return "?";
}

// One protocol event as observed by the coordinator. `seq` is the order in
// which the coordinator received or issued it; shard_id is -1 for the
// coordinator's own selection step.
struct ShardEvent {
  std::size_t seq = 0;
  int epoch = 0;
  int batch = 0;
  int shard_id = -1;
  ShardPhase phase = ShardPhase::score;
};

struct ShardedPcguResult {
  ParameterSet params;
  std::vector<PcguLogRow> log;
  std::vector<std::vector<PartitionSpec>> selections;
  std::vector<ShardEvent> events;
};

struct ShardOptions {
  // Called by a worker at the start of every batch; exceptions it throws
  // are treated as worker failures. Used to exercise failure handling.
  std::function<void(int shard, int epoch, int batch)> on_batch;
};

namespace shard_msg {

struct Batch {
  int epoch = 0;
  int batch = 0;
  ParameterSet snapshot;
  std::vector<ContrastivePair> pairs;
};

struct Selection {
  std::vector<PartitionSpec> selected;  // only this worker's partitions
};

struct Stop {};

using ToWorker = std::variant<Batch, Selection, Stop>;

struct Scores {
  int shard = 0;
  std::vector<PartitionScore> scores;
  double mean_adv_logprob = 0.0;
};

struct Updated {
  int shard = 0;
  std::map<std::string, Tensor> tensors;
};

struct Failed {
  int shard = 0;
  std::exception_ptr error;
};

using ToCoordinator = std::variant<Scores, Updated, Failed>;

}  // namespace shard_msg

namespace detail {

inline void shard_worker(int shard, std::vector<std::string> owned, const PCGUConfig& cfg, const ShardOptions& opts,
                         Channel<shard_msg::ToWorker>& inbox, Channel<shard_msg::ToCoordinator>& outbox) {
  using namespace shard_msg;
  try {
    std::map<std::string, Tensor> grads;  // step gradients of owned parameters
    while (auto msg = inbox.receive()) {
      if (std::holds_alternative<Stop>(*msg)) return;
      if (auto* b = std::get_if<Batch>(&*msg)) {
        if (opts.on_batch) opts.on_batch(shard, b->epoch, b->batch);
        const auto g = contrastive_gradients(b->snapshot, std::span<const ContrastivePair>(b->pairs));
        std::vector<PartitionSpec> specs;
        for (const auto& name : owned) {
          const auto& t = b->snapshot.at(name);
          const std::size_t n = cfg.axis == Axis::input ? t.rows() : t.cols();
          for (std::size_t i = 0; i < n; ++i) specs.push_back({name, cfg.axis, i});
        }
        Scores out{shard, partition_cosine_scores(g.a1, g.a2, std::span<const PartitionSpec>(specs)),
                   g.mean_adv_logprob};
        grads.clear();
        const auto& step_grads = cfg.direction == Direction::decrease_advantaged ? g.a1 : g.a2;
        std::map<std::string, Tensor> mine;
        for (const auto& name : owned) {
          grads.emplace(name, step_grads.at(name));
          mine.emplace(name, b->snapshot.at(name));
        }
        outbox.send(std::move(out));
        auto sel = inbox.receive();
        if (!sel || std::holds_alternative<Stop>(*sel)) return;
        const auto* s = std::get_if<Selection>(&*sel);
        if (!s) throw StateError("shard worker: expected a selection message");
        for (const auto& spec : s->selected) {
          auto it = mine.find(spec.param);
          if (it == mine.end()) throw StateError("shard worker: selection names a parameter it does not own");
          update_partition(it->second, grads.at(spec.param), spec, cfg.alpha, cfg.direction);
        }
        for (const auto& [name, t] : mine) require_finite(t, "sharded pcgu update");
        outbox.send(Updated{shard, std::move(mine)});
      }
    }
  } catch (...) {
    outbox.send(Failed{shard, std::current_exception()});
  }
}

}  // namespace detail

// Same result as run_pcgu for any shard count: every worker computes the
// same gradients from the same snapshot, and selection only depends on the
// multiset of scores.
inline ShardedPcguResult run_pcgu_sharded(const ParameterSet& params, std::span<const ContrastivePair> pairs,
                                          const PCGUConfig& cfg, int n_shards, const ShardOptions& opts = {}) {
  using namespace shard_msg;
  cfg.validate();
  params.validate();
  validate_pairs(pairs, params.config);
  const auto plan = plan_shards(params, n_shards);

  std::vector<Channel<ToWorker>> inboxes(static_cast<std::size_t>(n_shards));
  Channel<ToCoordinator> outbox;
  std::vector<std::thread> workers;
  for (int s = 0; s < n_shards; ++s) {
    workers.emplace_back(detail::shard_worker, s, plan.owned_by(s), std::cref(cfg), std::cref(opts),
                         std::ref(inboxes[static_cast<std::size_t>(s)]), std::ref(outbox));
  }
  auto shutdown = [&] {
    for (auto& in : inboxes) {
      in.send(Stop{});
      in.close();
    }
    for (auto& w : workers) w.join();
  };

  ShardedPcguResult out{params, {}, {}, {}};
  std::size_t seq = 0;
  auto expect = [&](auto tag) {
    using Want = decltype(tag);
    auto msg = outbox.receive();
    if (!msg) throw StateError("sharded pcgu: coordinator channel closed");
    if (auto* f = std::get_if<Failed>(&*msg)) std::rethrow_exception(f->error);
    auto* m = std::get_if<Want>(&*msg);
    if (!m) throw StateError("sharded pcgu: protocol violation");
    return std::move(*m);
  };
  // Each phase is a barrier, so events are logged in shard order once the
  // phase completes. Arrival order depends on thread scheduling and would
  // make the log nondeterministic.
  auto log_phase = [&](std::vector<int> shards, int epoch, int batch, ShardPhase phase) {
    std::sort(shards.begin(), shards.end());
    for (int s : shards) out.events.push_back({seq++, epoch, batch, s, phase});
  };

  try {
    Rng rng(cfg.seed);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto batches = epoch_batches(pairs.size(), cfg.batch_size, rng);
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const int bi = static_cast<int>(b);
        std::vector<ContrastivePair> batch;
        for (auto i : batches[b]) batch.push_back(pairs[i]);
        for (auto& in : inboxes) in.send(Batch{epoch, bi, out.params, batch});

        // Gather scores from every shard.
        std::vector<PartitionScore> all;
        double adv = 0.0;
        std::vector<int> arrived;
        for (int k = 0; k < n_shards; ++k) {
          auto sc = expect(Scores{});
          arrived.push_back(sc.shard);
          if (sc.shard == 0) adv = sc.mean_adv_logprob;
          all.insert(all.end(), sc.scores.begin(), sc.scores.end());
        }
        log_phase(arrived, epoch, bi, ShardPhase::score);
        std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.spec < y.spec; });
        auto selected = select_bottom_k(all, cfg.k_fraction);
        out.events.push_back({seq++, epoch, bi, -1, ShardPhase::select});

        std::vector<std::vector<PartitionSpec>> per_shard(static_cast<std::size_t>(n_shards));
        for (const auto& s : selected) per_shard[static_cast<std::size_t>(plan.assignment.at(s.param))].push_back(s);
        for (int k = 0; k < n_shards; ++k) {
          inboxes[static_cast<std::size_t>(k)].send(Selection{std::move(per_shard[static_cast<std::size_t>(k)])});
        }

        arrived.clear();
        for (int k = 0; k < n_shards; ++k) {
          auto up = expect(Updated{});
          arrived.push_back(up.shard);
          for (auto& [name, t] : up.tensors) out.params.at(name) = std::move(t);
        }
        log_phase(arrived, epoch, bi, ShardPhase::update);
        out.log.push_back({epoch, bi, adv, mean_cosine(all), selected.size()});
        out.selections.push_back(std::move(selected));
      }
    }
  } catch (...) {
    shutdown();
    throw;
  }
  shutdown();
  return out;
}

inline std::string sharded_log_csv(const ShardedPcguResult& r) {
  std::string out = csv_row(
      {"epoch", "batch", "mean_adv_logprob", "mean_cosine", "selected_count", "seq", "shard_id", "phase"});
  std::size_t row = 0;
  for (const auto& e : r.events) {
    while (row + 1 < r.log.size() && (r.log[row].epoch != e.epoch || r.log[row].batch != e.batch)) ++row;
    const auto& l = r.log[row];
    out += csv_row({std::to_string(e.epoch), std::to_string(e.batch), format_double(l.mean_adv_logprob),
                    format_double(l.mean_cosine), std::to_string(l.selected_count), std::to_string(e.seq),
                    std::to_string(e.shard_id), to_string(e.phase)});
  }
  return out;
}

}  // namespace unlearn
