#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unlearn/autodiff.hpp"
#include "unlearn/error.hpp"
#include "unlearn/model.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

using TensorMap = std::map<std::string, Tensor>;

// Adam with bias correction.
class Adam {
 public:
  struct Options {
    float learning_rate = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
  };

  explicit Adam(Options opts) : opts_(opts) {}

  // Updates every tensor of `params` that has an entry in `grads`.
  void step(TensorMap& params, const TensorMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(opts_.beta1), t_);
    const double bc2 = 1.0 - std::pow(static_cast<double>(opts_.beta2), t_);
    const auto step_size = static_cast<float>(opts_.learning_rate / bc1);
    const auto bc2_sqrt = static_cast<float>(std::sqrt(bc2));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& g = git->second;
      detail::require_same_shape(p, g, "adam");
      auto [mit, fresh] = m_.try_emplace(name, p.shape());
      auto vit = v_.try_emplace(name, p.shape()).first;
      (void)fresh;
      Tensor& m = mit->second;
      Tensor& v = vit->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = opts_.beta1 * m[i] + (1.0f - opts_.beta1) * g[i];
        v[i] = opts_.beta2 * v[i] + (1.0f - opts_.beta2) * g[i] * g[i];
        p[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + opts_.eps);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  Options opts_;
  int t_ = 0;
  TensorMap m_, v_;
};

struct LoraConfig {
  int rank = 8;
  float scale_alpha = 16.0f;
  // Parameter-name suffixes that receive adapters.
  std::vector<std::string> target_suffixes{"attn.wq", "attn.wv"};

  float scaling() const { return scale_alpha / static_cast<float>(rank); }
};

// Low-rank factors for one target matrix W[m×n]: delta = (alpha/r) · B[m×r] · A[r×n].
struct LoraAdapter {
  Tensor a;  // [r × n], seeded Gaussian
  Tensor b;  // [m × r], zero at init
};

using LoraAdapters = std::map<std::string, LoraAdapter>;

inline bool is_lora_target(const LoraConfig& cfg, const std::string& name) {
  for (const auto& s : cfg.target_suffixes)
    if (name.ends_with(s)) return true;
  return false;
}

inline LoraAdapters init_lora(const ParameterSet& params, const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank <= 0) throw ConfigError("lora: rank must be positive");
  if (!(cfg.scale_alpha > 0.0f)) throw ConfigError("lora: scale_alpha must be positive");
  LoraAdapters out;
  Rng rng(seed);
  const auto r = static_cast<std::size_t>(cfg.rank);
  for (const auto& [name, w] : params.tensors) {
    if (w.rank() != 2 || !is_lora_target(cfg, name)) continue;
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    LoraAdapter ad{Tensor(Shape{r, n}), Tensor(Shape{m, r})};
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(m));
    for (auto& v : ad.a.data()) v = static_cast<float>(rng.normal() * std_dev);
    out.emplace(name, std::move(ad));
  }
  if (out.empty()) throw ConfigError("lora: no parameter matches the target list");
  return out;
}

inline Tensor lora_delta(const LoraAdapter& ad, float scaling) { return scale(matmul(ad.b, ad.a), scaling); }

// W + (alpha/r)·B·A for every adapted matrix; other tensors are copied.
inline ParameterSet merge_lora(const ParameterSet& base, const LoraAdapters& adapters, const LoraConfig& cfg) {
  ParameterSet out = base;
  for (const auto& [name, ad] : adapters) {
    auto& w = out.at(name);
    w = add(w, lora_delta(ad, cfg.scaling()));
  }
  return out;
}

struct TrainConfig {
  int steps = 0;
  float learning_rate = 1e-3f;
  int batch_size = 16;
  int grad_accum = 1;
  std::uint64_t seed = 0;
  std::optional<LoraConfig> lora;

  void validate() const {
    if (steps < 0) throw ConfigError("train: steps must be non-negative");
    if (!(learning_rate > 0.0f)) throw ConfigError("train: learning_rate must be positive");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (grad_accum <= 0) throw ConfigError("train: grad_accum must be positive");
  }
};

struct TrainResult {
  ParameterSet params;
  std::vector<double> losses;  // mean token loss per optimizer step
};

// Token-weighted mean next-token loss of `batch` on a tape where `w` holds
// the (possibly adapter-augmented) weights.
template <typename T>
ad::Var<T> lm_batch_loss(const ModelConfig& c, const VarMap<T>& w, std::span<const Tokens> batch) {
  std::size_t total = 0;
  for (const auto& s : batch) {
    if (s.size() < 2) throw ConfigError("train: sequences need at least 2 tokens");
    total += s.size() - 1;
  }
  ad::Var<T> loss;
  for (const auto& s : batch) {
    std::span<const TokenId> ids(s);
    auto logits = forward(c, w, ids.first(s.size() - 1));
    auto ce = ad::scale(ad::cross_entropy(logits, ids.subspan(1)),
                        static_cast<T>(s.size() - 1) / static_cast<T>(total));
    loss = loss.valid() ? ad::add(loss, ce) : ce;
  }
  return loss;
}

namespace detail {

// Cycles through shuffled epochs of sequence indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    rng_.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Next-token training with Adam. With `cfg.lora` set only adapter factors
// train and the returned weights have the adapters merged in.
inline TrainResult train_lm(const ParameterSet& init, const std::vector<Tokens>& sequences, const TrainConfig& cfg) {
  cfg.validate();
  init.validate();
  if (sequences.empty()) throw ConfigError("train: empty corpus");
  TrainResult result{init, {}};
  if (cfg.steps == 0) return result;

  detail::BatchSampler sampler(sequences.size(), cfg.seed);
  Adam adam({cfg.learning_rate});
  LoraAdapters adapters;
  TensorMap lora_tensors;
  if (cfg.lora) {
    adapters = init_lora(init, *cfg.lora, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    for (const auto& [name, ad] : adapters) {
      lora_tensors.emplace(name + ".lora_a", ad.a);
      lora_tensors.emplace(name + ".lora_b", ad.b);
    }
  }
  TensorMap& trainable = cfg.lora ? lora_tensors : result.params.tensors;

  std::vector<Tokens> batch(static_cast<std::size_t>(cfg.batch_size));
  for (int step = 0; step < cfg.steps; ++step) {
    TensorMap grads;
    double step_loss = 0.0;
    for (int micro = 0; micro < cfg.grad_accum; ++micro) {
      const auto idx = sampler.next(batch.size());
      for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = sequences[idx[i]];

      ad::Tape<float> tape;
      VarMap<float> w;
      VarMap<float> leaves;
      if (cfg.lora) {
        const float s = cfg.lora->scaling();
        for (const auto& [name, t] : result.params.tensors) w.emplace(name, tape.constant(t));
        for (const auto& [name, ad] : adapters) {
          auto a = tape.leaf(lora_tensors.at(name + ".lora_a"));
          auto b = tape.leaf(lora_tensors.at(name + ".lora_b"));
          leaves.emplace(name + ".lora_a", a);
          leaves.emplace(name + ".lora_b", b);
          w.insert_or_assign(name, ad::add(w.at(name), ad::scale(ad::matmul(b, a), s)));
        }
      } else {
        w = bind(tape, result.params, true);
        leaves = w;
      }
      auto loss = lm_batch_loss<float>(init.config, w, batch);
      tape.backward(loss);
      step_loss += static_cast<double>(loss.value()[0]);
      for (const auto& [name, v] : leaves) {
        const Tensor& g = tape.grad(v);
        auto [it, fresh] = grads.try_emplace(name, g);
        if (!fresh) it->second = add(it->second, g);
      }
    }
    if (cfg.grad_accum > 1) {
      for (auto& [_, g] : grads) g = scale(g, 1.0f / static_cast<float>(cfg.grad_accum));
    }
    adam.step(trainable, grads);
    result.losses.push_back(step_loss / cfg.grad_accum);
    if (!std::isfinite(result.losses.back())) throw NumericError("train: loss became non-finite");
  }

  if (cfg.lora) {
    for (auto& [name, ad] : adapters) {
      ad.a = lora_tensors.at(name + ".lora_a");
      ad.b = lora_tensors.at(name + ".lora_b");
    }
    result.params = merge_lora(init, adapters, *cfg.lora);
  }
  for (const auto& [name, t] : result.params.tensors) require_finite(t, "train");
  return result;
}

}  // namespace unlearn
