#include "htwa/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace htwa::nn {

using engine::DiffArray;
using engine::Shape;

Linear Linear::create(ParamStore& store, const std::string& path, std::size_t in, std::size_t out, Rng& rng,
                      bool with_bias) {
  Linear l;
  l.weight = store.create(path + ".w", {in, out}, ParamStore::Init::kNormal, rng,
                          1.0 / std::sqrt(static_cast<double>(in)));
  if (with_bias) l.bias = store.create(path + ".b", {out}, ParamStore::Init::kZeros, rng);
  return l;
}

DiffArray Linear::operator()(const DiffArray& x) const {
  const std::size_t in = in_features();
  if (x.shape().empty() || x.shape().back() != in) {
    throw std::invalid_argument("Linear: input " + engine::shape_str(x.shape()) + " does not end in " +
                                std::to_string(in));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_features();
  DiffArray flat = x.rank() == 2 ? x : engine::reshape(x, {x.numel() / in, in});
  DiffArray y = engine::matmul(flat, weight);
  if (bias.defined()) y = engine::add(y, bias);
  return x.rank() == 2 ? y : engine::reshape(y, std::move(out_shape));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& path, std::size_t dim, Rng& rng) {
  return {store.create(path + ".gain", {dim}, ParamStore::Init::kOnes, rng),
          store.create(path + ".bias", {dim}, ParamStore::Init::kZeros, rng)};
}

DiffArray LayerNorm::operator()(const DiffArray& x) const { return engine::layernorm(x, gain, bias, 1e-6); }

FeedForward FeedForward::create(ParamStore& store, const std::string& path, std::size_t dim, std::size_t hidden,
                                Rng& rng) {
  return {Linear::create(store, path + ".fc1", dim, hidden, rng),
          Linear::create(store, path + ".fc2", hidden, dim, rng)};
}

DiffArray FeedForward::operator()(const DiffArray& x) const { return fc2(engine::gelu(fc1(x))); }

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& path, std::size_t dim,
                                              std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("attention " + path + ": dim " + std::to_string(dim) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
  MultiHeadAttention m;
  m.query = Linear::create(store, path + ".q", dim, dim, rng);
  m.key = Linear::create(store, path + ".k", dim, dim, rng);
  m.value = Linear::create(store, path + ".v", dim, dim, rng);
  m.output = Linear::create(store, path + ".o", dim, dim, rng);
  m.heads = heads;
  return m;
}

DiffArray MultiHeadAttention::operator()(const DiffArray& x, const AttentionMask& mask,
                                         const DiffArray& bias) const {
  if (x.rank() != 3) throw std::invalid_argument("attention: expected [groups, tokens, dim], got " + engine::shape_str(x.shape()));
  const std::size_t groups = x.dim(0), tokens = x.dim(1), dim = x.dim(2);
  if (dim % heads != 0) {
    throw std::invalid_argument("attention: dim " + std::to_string(dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = dim / heads;
  auto split_heads = [&](const DiffArray& t) {
    // [G, S, D] -> [G, h, S, dh]
    return engine::permute(engine::reshape(t, {groups, tokens, heads, head_dim}), {0, 2, 1, 3});
  };
  DiffArray q;
  DiffArray k;
  DiffArray v;
  {
    engine::MacCategory cat("projection");
    q = split_heads(query(x));
    k = split_heads(key(x));
    v = split_heads(value(x));
  }
  DiffArray scores;
  {
    engine::MacCategory cat("attention_scores");
    scores = engine::scale(engine::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  }
  if (bias.defined()) scores = engine::add(scores, bias);
  if (!mask.keys.empty()) {
    if (mask.keys.size() != groups * tokens) throw std::invalid_argument("attention: key mask size mismatch");
    std::vector<std::uint8_t> full(groups * heads * tokens * tokens);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < tokens; ++i)
          for (std::size_t j = 0; j < tokens; ++j)
            full[((g * heads + h) * tokens + i) * tokens + j] = mask.keys[g * tokens + j];
    scores = engine::masked_fill(scores, full);
  }
  if (!mask.pairs.empty()) {
    if (mask.pairs.size() != tokens * tokens) throw std::invalid_argument("attention: pair mask size mismatch");
    scores = engine::masked_fill(scores, mask.pairs);
  }
  DiffArray probs = engine::softmax(scores, 3);
  DiffArray context;
  {
    engine::MacCategory cat("attention_values");
    context = engine::bmm(probs, v);
  }
  context = engine::reshape(engine::permute(context, {0, 2, 1, 3}), {groups, tokens, dim});
  engine::MacCategory cat("projection");
  return output(context);
}

TransformerBlock TransformerBlock::create(ParamStore& store, const std::string& path, std::size_t dim,
                                          std::size_t heads, std::size_t hidden, Rng& rng) {
  return {LayerNorm::create(store, path + ".ln1", dim, rng),
          MultiHeadAttention::create(store, path + ".attn", dim, heads, rng),
          LayerNorm::create(store, path + ".ln2", dim, rng),
          FeedForward::create(store, path + ".ffn", dim, hidden, rng)};
}

DiffArray TransformerBlock::operator()(const DiffArray& x, const AttentionMask& mask, const DiffArray& bias) const {
  DiffArray h = engine::add(x, attention(norm1(x), mask, bias));
  engine::MacCategory cat("feed_forward");
  return engine::add(h, ffn(norm2(h)));
}

}  // namespace htwa::nn
