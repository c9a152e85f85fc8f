#pragma once

// Small seeded models and contrastive batches shared by the PCGU, shard and
// acceptance tests.

#include <cstdint>
#include <vector>

#include "unlearn/datasets.hpp"
#include "unlearn/model.hpp"
#include "unlearn/rng.hpp"

namespace unlearn::testing {

// 1 layer, d_model 16, vocab 32.
inline ModelConfig toy_config(std::uint32_t seed = 0) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  c.init_seed = seed;
  return c;
}

// Matrices redrawn with std 0.3 so toy distributions are far from uniform.
inline ParameterSet toy_model(std::uint32_t seed, ModelConfig c = toy_config()) {
  c.init_seed = seed;
  auto p = init_model(c);
  Rng rng(seed + 100);
  for (auto& [name, t] : p.tensors)
    if (t.rank() == 2)
      for (auto& v : t.data()) v = static_cast<float>(rng.normal() * 0.3);
  return p;
}

// Random [bos]-prefixed prompts of 3..8 tokens with distinct completions.
inline std::vector<ContrastivePair> toy_pairs(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed * 7919 + 1);
  const auto v = static_cast<std::uint64_t>(c.vocab_size);
  std::vector<ContrastivePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    ContrastivePair p;
    p.prefix.push_back(Vocab::kBos);
    const std::size_t len = 2 + rng.below(6);
    for (std::size_t j = 0; j < len; ++j) p.prefix.push_back(static_cast<TokenId>(4 + rng.below(v - 4)));
    p.advantaged = static_cast<TokenId>(4 + rng.below(v - 4));
    do p.disadvantaged = static_cast<TokenId>(4 + rng.below(v - 4));
    while (p.disadvantaged == p.advantaged);
    p.group = "gender identity";
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace unlearn::testing
