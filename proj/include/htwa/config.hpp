#pragma once

// Every tunable scalar of a run. Defaults are the desk-scale ("toy")
// configuration; full_size() returns the full-size encoder geometry.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "htwa/attention.hpp"

namespace htwa {

struct DataConfig {
  std::size_t clips = 4;            // M
  std::size_t frames_per_clip = 8;  // N
  std::size_t height = 2;           // H patches per frame
  std::size_t width = 2;            // W
  std::size_t patch_dim = 8;        // p values per patch
  std::size_t max_tokens = 8;       // L, including the per-sentence [CLS]
  std::size_t vocab = 256;          // content symbols; [CLS]/[MASK]/[PAD] are appended
  std::size_t latent_dim = 8;
  double walk_step = 1.0;
  double video_noise = 1.0;
  double topic_sharpness = 1.5;
  std::size_t train_size = 2000;
  std::size_t eval_size = 100;
  std::uint64_t seed = 1;

  std::size_t frames() const { return clips * frames_per_clip; }
};

struct TextEncoderConfig {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t part1_layers = 2;
  std::size_t part2_layers = 2;
  std::size_t ffn_hidden = 64;
};

struct VideoEncoderConfig {
  attention::WindowSchedule schedule;
  std::size_t ffn_ratio = 2;
  std::size_t clip_pool_times = 1;  // 2x2 mean pools before averaging a clip
};

struct CrossEncoderConfig {
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ffn_hidden = 64;
  std::size_t pool_h = 1;  // max-pool window (stride 1) over the final video grid
  std::size_t pool_w = 1;
};

struct ModelConfig {
  TextEncoderConfig text;
  VideoEncoderConfig video;
  CrossEncoderConfig cross;
  std::size_t embed_dim = 32;  // shared contrastive space
  std::uint64_t init_seed = 7;
};

struct LossConfig {
  double tau = 0.05;
  double lambda1 = 1.0;
  double lambda2 = 10.0;
  std::size_t anchors = 2;     // |A| = k
  std::size_t candidates = 2;  // |K|
  std::size_t negatives = 3;   // |N|
  double mask_rate = 0.15;
  double vtm_replace_prob = 0.5;
};

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t stage1_steps = 2000;
  std::size_t stage2_steps = 1000;
  std::size_t warmup_steps = 0;  // 0: one epoch of the training split
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  std::string data_path;        // empty: <out_dir>/data.shard
  std::string stage1_checkpoint;  // empty: <out_dir>/stage1.ckpt
  std::string stage2_checkpoint;  // empty: <out_dir>/stage2.ckpt
};

struct Config {
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  RunConfig run;

  Config();
  static Config toy();
  // 4 clips x 8 frames of 24x40 patches, the five-stage 128..1024-d video
  // schedule, 12-layer 1024-d text and cross encoders.
  static Config full_size();

  std::string data_path() const;
  std::string stage1_path() const;
  std::string stage2_path() const;

  // Throws ConfigError on the first inconsistency.
  void validate() const;
};

struct ConfigError : std::runtime_error {
  ConfigError(const std::string& key, const std::string& reason)
      : std::runtime_error(key + ": " + reason), key_path(key) {}
  std::string key_path;
};

// Token ids: [0, vocab) are content symbols followed by the specials.
struct Vocabulary {
  std::size_t content = 256;
  std::uint32_t cls() const { return static_cast<std::uint32_t>(content); }
  std::uint32_t mask() const { return static_cast<std::uint32_t>(content + 1); }
  std::uint32_t pad() const { return static_cast<std::uint32_t>(content + 2); }
  std::size_t size() const { return content + 3; }
  bool is_special(std::uint32_t id) const { return id >= content; }
};

}  // namespace htwa
