#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"
#include "unlearn/error.hpp"
#include "unlearn/model.hpp"
#include "unlearn/train.hpp"

// Task vectors: tau = theta_ft - theta_pre, applied as theta_pre + s·lambda·tau.
// Fine-tuning with adapters merges them first, so tau is always dense and
// shaped like the model.

namespace unlearn {

struct TaskVector {
  ParameterSet delta;  // same names and shapes as the originating model
};

struct FinetuneConfig {
  int steps = 1500;
  float learning_rate = 1e-3f;
  int batch_size = 4;
  int grad_accum = 4;
  std::optional<LoraConfig> lora = LoraConfig{};
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0) throw ConfigError("finetune: steps must be non-negative");
    if (!(learning_rate > 0.0f)) throw ConfigError("finetune: learning_rate must be positive");
    if (batch_size <= 0) throw ConfigError("finetune: batch_size must be positive");
    if (grad_accum <= 0) throw ConfigError("finetune: grad_accum must be positive");
    if (lora && (lora->rank <= 0 || !(lora->scale_alpha > 0.0f))) {
      throw ConfigError("finetune: lora rank and scale_alpha must be positive");
    }
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.steps = steps;
    t.learning_rate = learning_rate;
    t.batch_size = batch_size;
    t.grad_accum = grad_accum;
    t.seed = seed;
    t.lora = lora;
    return t;
  }
};

inline TrainResult finetune_lm(const ParameterSet& params, const std::vector<Tokens>& sequences,
                               const FinetuneConfig& cfg) {
  cfg.validate();
  if (sequences.empty()) throw ConfigError("finetune: empty corpus");
  return train_lm(params, sequences, cfg.train_config());
}

namespace detail {

inline void require_same_structure(const ParameterSet& a, const ParameterSet& b, const char* what) {
  if (a.tensors.size() != b.tensors.size()) throw ConfigError(std::string(what) + ": parameter sets differ in size");
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) throw ConfigError(std::string(what) + ": parameter '" + name + "' missing");
    if (it->second.shape() != t.shape()) {
      throw ConfigError(std::string(what) + ": shape mismatch for '" + name + "': " + shape_str(t.shape()) +
                        " vs " + shape_str(it->second.shape()));
    }
  }
}

}  // namespace detail

inline TaskVector compute_task_vector(const ParameterSet& pre, const ParameterSet& ft) {
  detail::require_same_structure(pre, ft, "compute_task_vector");
  TaskVector tv{{pre.config, {}}};
  for (const auto& [name, p] : pre.tensors) {
    const auto& f = ft.tensors.at(name);
    Tensor d(p.shape());
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] = f[i] - p[i];
    tv.delta.tensors.emplace(name, std::move(d));
  }
  return tv;
}

inline TaskVector scale(const TaskVector& tv, float s) {
  TaskVector out = tv;
  for (auto& [_, t] : out.delta.tensors)
    for (auto& v : t.data()) v = s * v;
  return out;
}

// pre + s·lambda·tv, s = -1 when negating. Each element is computed in
// double and rounded once, so negating the coefficient and negating the
// vector give bit-identical results, and lambda = 0 returns pre unchanged.
inline ParameterSet apply_task_vector(const ParameterSet& pre, const TaskVector& tv, double lambda, bool negate) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("apply_task_vector: lambda must be >= 0");
  detail::require_same_structure(pre, tv.delta, "apply_task_vector");
  if (lambda == 0.0) return pre;
  const double c = negate ? -lambda : lambda;
  ParameterSet out = pre;
  for (auto& [name, t] : out.tensors) {
    const auto& d = tv.delta.tensors.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      t[i] = static_cast<float>(static_cast<double>(t[i]) + c * static_cast<double>(d[i]));
    }
    require_finite(t, "apply_task_vector");
  }
  return out;
}

// Names of parameters on which the vector is nonzero.
inline std::vector<std::string> support(const TaskVector& tv) {
  std::vector<std::string> out;
  for (const auto& [name, t] : tv.delta.tensors)
    for (float v : t.data())
      if (v != 0.0f) {
        out.push_back(name);
        break;
      }
  return out;
}

inline Bytes save_task_vector(const TaskVector& tv) {
  tv.delta.validate();
  return encode_container(tv.delta, kKindTaskVector);
}

inline TaskVector load_task_vector(const Bytes& bytes) {
  auto dec = decode_container(bytes);
  if (dec.kind != kKindTaskVector) throw FormatError("expected a task vector, found kind '" + dec.kind + "'");
  return {std::move(dec.params)};
}

inline void save_task_vector_file(const std::filesystem::path& path, const TaskVector& tv) {
  write_file(path, save_task_vector(tv));
}

inline TaskVector load_task_vector_file(const std::filesystem::path& path) {
  return load_task_vector(read_file(path));
}

}  // namespace unlearn
