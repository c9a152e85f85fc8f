#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/autodiff.hpp"
#include "unlearn/error.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/tensor.hpp"

// Decoder-only transformer: learned token and position embeddings, pre-norm
// blocks (causal multi-head attention, GELU MLP), final layer norm and an
// untied output head.
//
// Weight matrices are stored [in × out] and applied as x · W, so row i of a
// matrix holds every weight reading input unit i.

namespace unlearn {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 0;
  int max_seq_len = 128;
  std::uint32_t init_seed = 0;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace names {

inline std::string layer(int l, const char* suffix) { return "layer." + std::to_string(l) + "." + suffix; }

inline const std::string kTokEmb = "tok_emb";
inline const std::string kPosEmb = "pos_emb";
inline const std::string kLnFGain = "ln_f.gain";
inline const std::string kLnFBias = "ln_f.bias";
inline const std::string kHead = "head";

}  // namespace names

// Name → shape for every parameter of a config, in lexicographic order.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::map<std::string, Shape> s;
  s[names::kTokEmb] = {v, d};
  s[names::kPosEmb] = {static_cast<std::size_t>(c.max_seq_len), d};
  for (int l = 0; l < c.n_layers; ++l) {
    s[names::layer(l, "ln1.gain")] = {d};
    s[names::layer(l, "ln1.bias")] = {d};
    s[names::layer(l, "attn.wq")] = {d, d};
    s[names::layer(l, "attn.wk")] = {d, d};
    s[names::layer(l, "attn.wv")] = {d, d};
    s[names::layer(l, "attn.wo")] = {d, d};
    s[names::layer(l, "ln2.gain")] = {d};
    s[names::layer(l, "ln2.bias")] = {d};
    s[names::layer(l, "mlp.w1")] = {d, f};
    s[names::layer(l, "mlp.b1")] = {f};
    s[names::layer(l, "mlp.w2")] = {f, d};
    s[names::layer(l, "mlp.b2")] = {d};
  }
  s[names::kLnFGain] = {d};
  s[names::kLnFBias] = {d};
  s[names::kHead] = {d, v};
  return s;
}

// Closed form of the total element count of parameter_shapes(c).
inline std::size_t parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size, s = c.max_seq_len, L = c.n_layers;
  return v * d + s * d + L * (4 * d * d + 2 * d * f + f + 5 * d) + 2 * d + d * v;
}

template <typename T>
struct BasicParameterSet {
  ModelConfig config;
  std::map<std::string, BasicTensor<T>> tensors;

  const BasicTensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.numel();
    return n;
  }

  template <typename U>
  BasicParameterSet<U> cast() const {
    BasicParameterSet<U> out{config, {}};
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }

  // Throws unless names and shapes match the config exactly.
  void validate() const {
    const auto shapes = parameter_shapes(config);
    if (shapes.size() != tensors.size()) {
      throw ConfigError("parameter set has " + std::to_string(tensors.size()) + " tensors, config expects " +
                        std::to_string(shapes.size()));
    }
    for (const auto& [name, shape] : shapes) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw ConfigError("parameter set is missing '" + name + "'");
      if (it->second.shape() != shape) {
        throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                             ", config expects " + shape_str(shape));
      }
    }
  }

  friend bool operator==(const BasicParameterSet&, const BasicParameterSet&) = default;
};

using ParameterSet = BasicParameterSet<float>;

template <typename T>
bool bit_identical(const BasicParameterSet<T>& a, const BasicParameterSet<T>& b) {
  if (!(a.config == b.config) || a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || !bit_identical(t, it->second)) return false;
  }
  return true;
}

inline constexpr float kInitStd = 0.02f;

// Matrices ~ N(0, 0.02²); layer-norm gains 1; biases 0. Draws happen in
// lexicographic name order from a single generator seeded by init_seed.
inline ParameterSet init_model(const ModelConfig& config) {
  config.validate();
  ParameterSet ps{config, {}};
  Rng rng(config.init_seed);
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Tensor t(shape);
    if (shape.size() == 2) {
      for (auto& v : t.data()) v = static_cast<float>(rng.normal()) * kInitStd;
    } else if (name.ends_with(".gain")) {
      for (auto& v : t.data()) v = 1.0f;
    }
    ps.tensors.emplace(name, std::move(t));
  }
  return ps;
}

template <typename T>
using VarMap = std::map<std::string, ad::Var<T>>;

// Places every tensor of `params` on the tape.
template <typename T>
VarMap<T> bind(ad::Tape<T>& tape, const BasicParameterSet<T>& params, bool requires_grad) {
  VarMap<T> vars;
  for (const auto& [name, t] : params.tensors) vars.emplace(name, tape.leaf(t, requires_grad));
  return vars;
}

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ConfigError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.max_seq_len)) {
    throw ConfigError("forward: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));
  }
  for (auto id : tokens) {
    if (id < 0 || id >= c.vocab_size) {
      throw ConfigError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(c.vocab_size));
    }
  }
}

// Logits [T × V] for next-token prediction at each position.
template <typename T>
ad::Var<T> forward(const ModelConfig& c, const VarMap<T>& w, std::span<const TokenId> tokens) {
  check_tokens(c, tokens);
  auto get = [&w](const std::string& name) -> const ad::Var<T>& {
    auto it = w.find(name);
    if (it == w.end()) throw ConfigError("forward: missing parameter '" + name + "'");
    return it->second;
  };
  const std::size_t n = tokens.size();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const std::size_t dh = d / heads;
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<TokenId> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<TokenId>(i);
  auto x = ad::add(ad::embedding(get(names::kTokEmb), tokens), ad::embedding(get(names::kPosEmb), positions));

  for (int l = 0; l < c.n_layers; ++l) {
    auto h = ad::layer_norm(x, get(names::layer(l, "ln1.gain")), get(names::layer(l, "ln1.bias")));
    auto q = ad::matmul(h, get(names::layer(l, "attn.wq")));
    auto k = ad::matmul(h, get(names::layer(l, "attn.wk")));
    auto v = ad::matmul(h, get(names::layer(l, "attn.wv")));
    std::vector<ad::Var<T>> outs;
    outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t b = hd * dh, e = b + dh;
      auto scores = ad::scale(ad::matmul_nt(ad::slice_cols(q, b, e), ad::slice_cols(k, b, e)), inv_sqrt_dh);
      outs.push_back(ad::matmul(ad::causal_softmax_rows(scores), ad::slice_cols(v, b, e)));
    }
    auto attn = heads == 1 ? outs[0] : ad::concat_cols<T>(outs);
    x = ad::add(x, ad::matmul(attn, get(names::layer(l, "attn.wo"))));

    auto h2 = ad::layer_norm(x, get(names::layer(l, "ln2.gain")), get(names::layer(l, "ln2.bias")));
    auto up = ad::gelu(ad::add_row(ad::matmul(h2, get(names::layer(l, "mlp.w1"))), get(names::layer(l, "mlp.b1"))));
    x = ad::add(x, ad::add_row(ad::matmul(up, get(names::layer(l, "mlp.w2"))), get(names::layer(l, "mlp.b2"))));
  }
  auto hf = ad::layer_norm(x, get(names::kLnFGain), get(names::kLnFBias));
  return ad::matmul(hf, get(names::kHead));
}

template <typename T>
BasicTensor<T> forward(const BasicParameterSet<T>& params, std::span<const TokenId> tokens) {
  ad::Tape<T> tape;
  auto vars = bind(tape, params, false);
  return forward(params.config, vars, tokens).value();
}

// Σ_{t=1}^{T-1} log p(tokens[t] | tokens[<t]); token 0 only conditions.
template <typename T>
double sequence_logprob(const BasicParameterSet<T>& params, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw ConfigError("sequence_logprob: need at least 2 tokens");
  const auto ls = log_softmax_rows(forward(params, tokens));
  double total = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    total += static_cast<double>(ls.at(t - 1, static_cast<std::size_t>(tokens[t])));
  }
  return total;
}

// log p(completion | prefix).
template <typename T>
double last_token_logprob(const BasicParameterSet<T>& params, std::span<const TokenId> prefix, TokenId completion) {
  if (prefix.empty()) throw ConfigError("last_token_logprob: empty prefix");
  const auto logits = forward(params, prefix);
  if (completion < 0 || completion >= params.config.vocab_size) {
    throw ConfigError("last_token_logprob: completion id " + std::to_string(completion) + " outside vocabulary");
  }
  const auto ls = log_softmax_rows(slice_rows(logits, logits.rows() - 1, logits.rows()));
  return static_cast<double>(ls.at(0, static_cast<std::size_t>(completion)));
}

// Differentiable log-softmax row for the token following `prefix`.
template <typename T>
ad::Var<T> next_token_log_probs(const ModelConfig& c, const VarMap<T>& w, std::span<const TokenId> prefix) {
  auto logits = forward(c, w, prefix);
  const std::size_t last = logits.value().rows() - 1;
  return ad::log_softmax_rows(ad::slice_rows(logits, last, last + 1));
}

// Greedy decoding at temperature 0 (ties → lowest id), seeded sampling
// otherwise. Returns prompt followed by the generated tokens.
template <typename T>
Tokens generate(const BasicParameterSet<T>& params, std::span<const TokenId> prompt, int max_new, double temperature,
                std::uint64_t seed) {
  if (max_new < 0) throw ConfigError("generate: max_new must be non-negative");
  if (temperature < 0.0) throw ConfigError("generate: temperature must be non-negative");
  if (prompt.empty()) throw ConfigError("generate: empty prompt");
  if (prompt.size() + static_cast<std::size_t>(max_new) > static_cast<std::size_t>(params.config.max_seq_len)) {
    throw ConfigError("generate: prompt plus max_new exceeds context of " +
                      std::to_string(params.config.max_seq_len) + " tokens");
  }
  Tokens out(prompt.begin(), prompt.end());
  Rng rng(seed);
  for (int step = 0; step < max_new; ++step) {
    const auto logits = forward(params, out);
    const auto last = logits.row(logits.rows() - 1);
    std::size_t pick = 0;
    if (temperature == 0.0) {
      for (std::size_t i = 1; i < last.size(); ++i)
        if (last[i] > last[pick]) pick = i;
    } else {
      double mx = static_cast<double>(last[0]);
      for (auto v : last) mx = std::max(mx, static_cast<double>(v));
      std::vector<double> p(last.size());
      double total = 0.0;
      for (std::size_t i = 0; i < last.size(); ++i) {
        p[i] = std::exp((static_cast<double>(last[i]) - mx) / temperature);
        total += p[i];
      }
      const double u = rng.uniform() * total;
      double acc = 0.0;
      pick = last.size() - 1;
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    }
    out.push_back(static_cast<TokenId>(pick));
  }
  return out;
}

}  // namespace unlearn
