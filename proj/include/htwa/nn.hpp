#pragma once

// Transformer building blocks shared by the text, video and cross-modal
// encoders. All blocks take token batches shaped [groups, tokens, dim].

#include <cstdint>
#include <string>
#include <vector>

#include "htwa/engine.hpp"
#include "htwa/params.hpp"

namespace htwa::nn {

struct Linear {
  engine::DiffArray weight;  // [in, out]
  engine::DiffArray bias;    // [out], undefined when created without bias

  static Linear create(ParamStore& store, const std::string& path, std::size_t in, std::size_t out,
                       Rng& rng, bool with_bias = true);
  // x: [..., in] -> [..., out]
  engine::DiffArray operator()(const engine::DiffArray& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
  engine::DiffArray gain;
  engine::DiffArray bias;

  static LayerNorm create(ParamStore& store, const std::string& path, std::size_t dim, Rng& rng);
  engine::DiffArray operator()(const engine::DiffArray& x) const;
};

struct FeedForward {
  Linear fc1;
  Linear fc2;

  static FeedForward create(ParamStore& store, const std::string& path, std::size_t dim,
                            std::size_t hidden, Rng& rng);
  engine::DiffArray operator()(const engine::DiffArray& x) const;
};

// Masks applied to attention logits before softmax. `keys` is [groups, tokens]
// and hides individual key positions (padding); `pairs` is [tokens, tokens]
// and is shared by all groups and heads. Either may be empty.
struct AttentionMask {
  std::vector<std::uint8_t> keys;
  std::vector<std::uint8_t> pairs;
  bool empty() const { return keys.empty() && pairs.empty(); }
};

struct MultiHeadAttention {
  Linear query, key, value, output;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParamStore& store, const std::string& path, std::size_t dim,
                                   std::size_t heads, Rng& rng);
  // x: [groups, tokens, dim]. bias, when defined, is [heads, tokens, tokens]
  // and is added to every group's logits.
  engine::DiffArray operator()(const engine::DiffArray& x, const AttentionMask& mask = {},
                               const engine::DiffArray& bias = {}) const;
};

// Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm norm1;
  MultiHeadAttention attention;
  LayerNorm norm2;
  FeedForward ffn;

  static TransformerBlock create(ParamStore& store, const std::string& path, std::size_t dim,
                                 std::size_t heads, std::size_t hidden, Rng& rng);
  engine::DiffArray operator()(const engine::DiffArray& x, const AttentionMask& mask = {},
                               const engine::DiffArray& bias = {}) const;
};

}  // namespace htwa::nn
