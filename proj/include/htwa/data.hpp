#pragma once

// Synthetic long-form video/paragraph pairs, batching, MLM masking and VTM
// negative pairing.
//
// Every sample follows a latent script: M topic vectors produced by a random
// walk, so clips that are close in time have close topics. Clip m's patches
// are a fixed linear image of topic m plus Gaussian noise; sentence m's
// tokens are drawn from softmax(sharpness * E * topic_m).

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "htwa/config.hpp"
#include "htwa/engine.hpp"
#include "htwa/rng.hpp"

namespace htwa::data {

struct Dims {
  std::size_t clips = 0, frames_per_clip = 0, height = 0, width = 0, patch_dim = 0;
  std::size_t max_tokens = 0, vocab = 0, latent_dim = 0;

  static Dims of(const DataConfig& config);
  std::size_t frames() const { return clips * frames_per_clip; }
  std::size_t video_size() const { return frames() * height * width * patch_dim; }
  std::size_t token_count() const { return clips * max_tokens; }
  bool operator==(const Dims&) const = default;
};

struct PairedSample {
  std::uint64_t id = 0;
  std::vector<double> topics;         // [M, latent_dim], the latent script
  std::vector<double> video;          // [M*N, H, W, p]
  std::vector<std::uint32_t> tokens;  // [M, L]: [CLS], content..., [PAD]...
};

struct Dataset {
  Dims dims;
  std::vector<PairedSample> eval;   // ids [0, eval_size)
  std::vector<PairedSample> train;  // ids [eval_size, eval_size + train_size)
};

// The fixed linear maps shared by all samples of a generator seed.
struct World {
  std::vector<double> video_map;  // [H*W*p, latent_dim]
  std::vector<double> word_map;   // [vocab, latent_dim]

  static World create(const DataConfig& config);
};

PairedSample generate_sample(const DataConfig& config, const World& world, std::uint64_t id);
// Throws std::invalid_argument on invalid dims.
Dataset generate(const DataConfig& config);

// Flat little-endian shard: "HTWADATA", u32 version, u32 M N H W p L vocab,
// u64 count, u32 latent_dim, u64 eval_count, then per sample u64 id,
// f64 topics, f64 video, u32 tokens.
void write_shard(const Dataset& dataset, const std::string& path);
Dataset read_shard(const std::string& path);

// ---------------------------------------------------------------------------

struct TextBatch {
  std::size_t batch = 0, sentences = 0, max_tokens = 0;
  std::vector<std::uint32_t> ids;  // [B, M, L]
  std::vector<std::uint8_t> pad;   // [B, M, L], 1 at [PAD] positions

  // Rejects ids outside [0, vocab.size()) and sentences without a leading [CLS].
  void validate(const Vocabulary& vocab) const;
};

struct VideoBatch {
  engine::DiffArray patches;  // [B, M*N, H, W, p]
  std::size_t clips = 0, frames_per_clip = 0;

  std::size_t batch() const { return patches.dim(0); }
  std::size_t frames() const { return patches.dim(1); }
};

TextBatch make_text_batch(const std::vector<const PairedSample*>& samples, const Dims& dims);
VideoBatch make_video_batch(const std::vector<const PairedSample*>& samples, const Dims& dims);
// Keeps `per_clip` uniformly spaced frames of every clip (frame
// floor((i + 0.5) * N / per_clip) of each clip).
VideoBatch subsample_frames(const VideoBatch& video, std::size_t per_clip);

struct MaskedBatch {
  TextBatch text;                         // ids after corruption
  std::vector<std::size_t> positions;     // flat [B*M*L] indices selected for prediction
  std::vector<std::uint32_t> labels;      // original ids at those positions
};

// Selects each non-special token with probability `rate`; a selected token
// becomes [MASK] with probability 0.8, a random content symbol with 0.1 and
// stays unchanged with 0.1.
MaskedBatch mask_tokens(const TextBatch& batch, const Vocabulary& vocab, double rate, Rng& rng);

struct VtmPairing {
  std::vector<std::size_t> video_index;  // video paired with each paragraph
  std::vector<std::size_t> labels;       // 1 matched, 0 replaced
};

// With probability `prob` a paragraph's video is replaced by the video of a
// different sample drawn uniformly. Rejects batch < 2.
VtmPairing vtm_pairs(std::size_t batch, double prob, Rng& rng);

}  // namespace htwa::data
