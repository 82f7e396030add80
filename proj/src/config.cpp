#include "htwa/config.hpp"

#include <filesystem>

namespace htwa {

namespace {

attention::StageSpec stage(std::size_t layers, std::size_t dim, std::size_t heads, std::size_t window,
                           std::size_t sh, std::size_t sw, std::size_t merge) {
  attention::StageSpec s;
  s.layers = layers;
  s.dim = dim;
  s.heads = heads;
  s.temporal_window = window;
  s.spatial_h = sh;
  s.spatial_w = sw;
  s.merge = merge;
  return s;
}

std::string under(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace

Config::Config() {
  // Clip stage at the clip length, then one merged full-video stage.
  model.video.schedule.stages = {stage(1, 32, 2, 8, 0, 0, 1), stage(1, 32, 2, 32, 0, 0, 2)};
}

Config Config::toy() { return Config(); }

Config Config::full_size() {
  Config c;
  c.data.clips = 4;
  c.data.frames_per_clip = 8;
  c.data.height = 24;
  c.data.width = 40;
  c.data.patch_dim = 8 * 8 * 3;
  c.data.max_tokens = 50;
  c.data.vocab = 30522;
  c.model.text = {1024, 16, 8, 4, 4096};
  c.model.video.schedule.stages = {stage(2, 128, 4, 2, 3, 5, 1), stage(2, 256, 8, 4, 3, 5, 2),
                                   stage(14, 512, 16, 8, 3, 5, 2), stage(4, 512, 16, 16, 3, 5, 1),
                                   stage(2, 1024, 32, 32, 3, 5, 2)};
  c.model.video.ffn_ratio = 4;
  c.model.video.clip_pool_times = 1;
  c.model.cross = {1024, 16, 12, 4096, 2, 3};
  c.model.embed_dim = 256;
  return c;
}

std::string Config::data_path() const { return run.data_path.empty() ? under(run.out_dir, "data.shard") : run.data_path; }
std::string Config::stage1_path() const {
  return run.stage1_checkpoint.empty() ? under(run.out_dir, "stage1.ckpt") : run.stage1_checkpoint;
}
std::string Config::stage2_path() const {
  return run.stage2_checkpoint.empty() ? under(run.out_dir, "stage2.ckpt") : run.stage2_checkpoint;
}

void Config::validate() const {
  auto require = [](bool ok, const char* key, const std::string& reason) {
    if (!ok) throw ConfigError(key, reason);
  };
  const DataConfig& d = data;
  require(d.clips >= 1, "data.clips", "must be >= 1");
  require(d.frames_per_clip >= 1, "data.frames_per_clip", "must be >= 1");
  require(d.height >= 1 && d.width >= 1, "data.height", "grid must be non-empty");
  require(d.patch_dim >= 1, "data.patch_dim", "must be >= 1");
  require(d.max_tokens >= 2, "data.max_tokens", "needs room for [CLS] and one word");
  require(d.vocab >= 2, "data.vocab", "must be >= 2");
  require(d.latent_dim >= 1, "data.latent_dim", "must be >= 1");
  require(d.walk_step >= 0.0, "data.walk_step", "must be >= 0");
  require(d.video_noise >= 0.0, "data.video_noise", "must be >= 0");
  require(d.eval_size >= 1, "data.eval_size", "must be >= 1");
  require(d.train_size >= 2, "data.train_size", "must be >= 2");

  const auto& sched = model.video.schedule;
  try {
    sched.validate(d.frames(), d.height, d.width);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model.video.schedule", e.what());
  }
  bool has_clip_stage = false;
  const auto grids = sched.stage_grids(d.height, d.width);
  for (std::size_t i = 0; i < sched.stages.size(); ++i) {
    if (sched.stages[i].temporal_window != d.frames_per_clip) continue;
    has_clip_stage = true;
    auto [h, w] = grids[i];
    for (std::size_t p = 0; p < model.video.clip_pool_times; ++p) {
      require(h % 2 == 0 && w % 2 == 0, "model.video.clip_pool_times",
              "clip-stage grid " + std::to_string(grids[i].first) + "x" + std::to_string(grids[i].second) +
                  " cannot be 2x2-pooled " + std::to_string(model.video.clip_pool_times) + " times");
      h /= 2;
      w /= 2;
    }
  }
  require(has_clip_stage, "model.video.schedule",
          "no stage has a temporal window equal to frames_per_clip (" + std::to_string(d.frames_per_clip) + ")");
  require(model.video.ffn_ratio >= 1, "model.video.ffn_ratio", "must be >= 1");

  const auto& t = model.text;
  require(t.heads >= 1 && t.dim % t.heads == 0, "model.text.heads", "must divide model.text.dim");
  require(t.part1_layers >= 1, "model.text.part1_layers", "must be >= 1");
  require(t.ffn_hidden >= 1, "model.text.ffn_hidden", "must be >= 1");
  const auto& c = model.cross;
  require(c.heads >= 1 && c.dim % c.heads == 0, "model.cross.heads", "must divide model.cross.dim");
  require(c.ffn_hidden >= 1, "model.cross.ffn_hidden", "must be >= 1");
  const auto [fh, fw] = grids.back();
  require(c.pool_h >= 1 && c.pool_h <= fh, "model.cross.pool_h", "must be in [1, final grid height]");
  require(c.pool_w >= 1 && c.pool_w <= fw, "model.cross.pool_w", "must be in [1, final grid width]");
  require(model.embed_dim >= 1, "model.embed_dim", "must be >= 1");

  const auto& l = loss;
  require(l.tau > 0.0, "loss.tau", "must be > 0");
  require(l.lambda1 >= 0.0, "loss.lambda1", "must be >= 0");
  require(l.lambda2 >= 0.0, "loss.lambda2", "must be >= 0");
  require(l.anchors >= 1 && l.anchors <= d.clips, "loss.anchors", "must be in [1, data.clips]");
  require(l.candidates >= 1 && l.candidates <= d.clips, "loss.candidates", "must be in [1, data.clips]");
  require(l.mask_rate > 0.0 && l.mask_rate < 1.0, "loss.mask_rate", "must be in (0, 1)");
  require(l.vtm_replace_prob >= 0.0 && l.vtm_replace_prob <= 1.0, "loss.vtm_replace_prob", "must be in [0, 1]");

  const auto& o = optim;
  require(o.lr > 0.0, "optim.lr", "must be > 0");
  require(o.weight_decay >= 0.0, "optim.weight_decay", "must be >= 0");
  require(o.beta1 >= 0.0 && o.beta1 < 1.0, "optim.beta1", "must be in [0, 1)");
  require(o.beta2 >= 0.0 && o.beta2 < 1.0, "optim.beta2", "must be in [0, 1)");
  require(o.eps > 0.0, "optim.eps", "must be > 0");
  require(o.batch_size >= 2, "optim.batch_size", "in-batch contrastive loss needs >= 2");
  require(o.batch_size <= d.train_size, "optim.batch_size", "exceeds data.train_size");
  require(!run.out_dir.empty(), "run.out_dir", "must not be empty");
}

}  // namespace htwa
