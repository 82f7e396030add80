#include "htwa/encoders.hpp"

#include <stdexcept>

namespace htwa::encoders {

using engine::DiffArray;

namespace {

std::size_t find_clip_stage(const attention::WindowSchedule& schedule, std::size_t frames_per_clip) {
  std::size_t found = schedule.stages.size();
  for (std::size_t i = 0; i < schedule.stages.size(); ++i)
    if (schedule.stages[i].temporal_window == frames_per_clip) found = i;
  if (found == schedule.stages.size())
    throw std::invalid_argument("video schedule has no stage with temporal window " + std::to_string(frames_per_clip));
  return found;
}

std::string stage_path(std::size_t s) { return "video.stage" + std::to_string(s); }

// [B, T, h, w, C] -> [B, T, h/2, w/2, 4C]
DiffArray gather_2x2(const DiffArray& x) {
  const auto& s = x.shape();
  DiffArray y = engine::reshape(x, {s[0], s[1], s[2] / 2, 2, s[3] / 2, 2, s[4]});
  y = engine::permute(y, {0, 1, 2, 4, 3, 5, 6});
  return engine::reshape(y, {s[0], s[1], s[2] / 2, s[3] / 2, 4 * s[4]});
}

std::vector<std::size_t> iota_mod(std::size_t count, std::size_t divisor, std::size_t modulus) {
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = (i / divisor) % modulus;
  return out;
}

}  // namespace

ShapePlan plan_shapes(const Config& config) {
  config.validate();
  const auto& d = config.data;
  const auto& sched = config.model.video.schedule;
  ShapePlan p;
  p.text_part1_tokens = d.max_tokens;
  p.text_part2_tokens = 1 + d.clips * d.max_tokens;
  p.stage_grids = sched.stage_grids(d.height, d.width);
  for (const auto& st : sched.stages) p.stage_dims.push_back(st.dim);
  p.clip_stage = find_clip_stage(sched, d.frames_per_clip);
  p.clip_reps = d.clips;
  const auto [fh, fw] = p.stage_grids.back();
  p.cross_video_tokens_per_frame = (fh - config.model.cross.pool_h + 1) * (fw - config.model.cross.pool_w + 1);
  p.cross_tokens = p.text_part2_tokens + d.frames() * p.cross_video_tokens_per_frame;
  return p;
}

VideoLanguageModel VideoLanguageModel::create(const Config& config, ParamStore& store) {
  config.validate();
  VideoLanguageModel m;
  m.config_ = config;
  m.vocab_ = Vocabulary{config.data.vocab};
  Rng rng(config.model.init_seed);
  const auto& d = config.data;
  const auto& tc = config.model.text;
  const auto& vc = config.model.video;
  const auto& cc = config.model.cross;
  const std::size_t embed = config.model.embed_dim;
  using Init = ParamStore::Init;

  m.tok_emb_ = store.create("text.tok_emb", {m.vocab_.size(), tc.dim}, Init::kNormal, rng);
  m.pos_emb_ = store.create("text.pos_emb", {d.max_tokens, tc.dim}, Init::kNormal, rng);
  m.seg_emb_ = store.create("text.seg_emb", {d.clips, tc.dim}, Init::kNormal, rng);
  m.text_emb_norm_ = nn::LayerNorm::create(store, "text.emb_norm", tc.dim, rng);
  for (std::size_t i = 0; i < tc.part1_layers; ++i)
    m.part1_.push_back(nn::TransformerBlock::create(store, "text.part1.layer" + std::to_string(i), tc.dim, tc.heads,
                                                    tc.ffn_hidden, rng));
  m.part1_norm_ = nn::LayerNorm::create(store, "text.part1.norm", tc.dim, rng);
  for (std::size_t i = 0; i < tc.part2_layers; ++i)
    m.part2_.push_back(nn::TransformerBlock::create(store, "text.part2.layer" + std::to_string(i), tc.dim, tc.heads,
                                                    tc.ffn_hidden, rng));
  m.part2_norm_ = nn::LayerNorm::create(store, "text.part2.norm", tc.dim, rng);

  const auto& sched = vc.schedule;
  const std::size_t d0 = sched.stages.front().dim;
  m.patch_embed_ = nn::Linear::create(store, "video.patch_embed", d.patch_dim, d0, rng);
  const auto grids = sched.stage_grids(d.height, d.width);
  for (std::size_t s = 0; s < sched.stages.size(); ++s) {
    const auto& spec = sched.stages[s];
    VideoStage stage;
    stage.spec = spec;
    if (spec.merge == 2) {
      const std::size_t prev = sched.stages[s - 1].dim;
      stage.merge_norm = nn::LayerNorm::create(store, stage_path(s) + ".merge_norm", 4 * prev, rng);
      stage.merge_proj = nn::Linear::create(store, stage_path(s) + ".merge", 4 * prev, spec.dim, rng, false);
    }
    const std::size_t wh = spec.spatial_h == 0 ? grids[s].first : spec.spatial_h;
    const std::size_t ww = spec.spatial_w == 0 ? grids[s].second : spec.spatial_w;
    for (std::size_t l = 0; l < spec.layers; ++l) {
      const std::string p = stage_path(s) + ".layer" + std::to_string(l);
      stage.blocks.push_back({nn::LayerNorm::create(store, p + ".ln1", spec.dim, rng),
                              attention::WindowAttention::create(store, p + ".attn", spec.dim, spec.heads,
                                                                 spec.temporal_window, wh, ww, rng),
                              nn::LayerNorm::create(store, p + ".ln2", spec.dim, rng),
                              nn::FeedForward::create(store, p + ".ffn", spec.dim, vc.ffn_ratio * spec.dim, rng)});
    }
    m.stages_.push_back(std::move(stage));
  }
  m.clip_stage_ = find_clip_stage(sched, d.frames_per_clip);
  const std::size_t clip_dim = sched.stages[m.clip_stage_].dim;
  const std::size_t final_dim = sched.stages.back().dim;
  m.clip_norm_ = nn::LayerNorm::create(store, "video.clip_norm", clip_dim, rng);
  m.video_norm_ = nn::LayerNorm::create(store, "video.final_norm", final_dim, rng);

  m.head_sentence_ = nn::Linear::create(store, "head.sentence", tc.dim, embed, rng);
  m.head_paragraph_ = nn::Linear::create(store, "head.paragraph", tc.dim, embed, rng);
  m.head_clip_ = nn::Linear::create(store, "head.clip", clip_dim, embed, rng);
  m.head_video_ = nn::Linear::create(store, "head.video", final_dim, embed, rng);

  m.cross_text_in_ = nn::Linear::create(store, "cross.text_in", tc.dim, cc.dim, rng);
  m.cross_video_in_ = nn::Linear::create(store, "cross.video_in", final_dim, cc.dim, rng);
  m.cross_type_emb_ = store.create("cross.type_emb", {2, cc.dim}, Init::kNormal, rng);
  m.cross_frame_emb_ = store.create("cross.frame_emb", {d.frames(), cc.dim}, Init::kNormal, rng);
  for (std::size_t i = 0; i < cc.layers; ++i)
    m.cross_blocks_.push_back(
        nn::TransformerBlock::create(store, "cross.layer" + std::to_string(i), cc.dim, cc.heads, cc.ffn_hidden, rng));
  m.cross_norm_ = nn::LayerNorm::create(store, "cross.norm", cc.dim, rng);
  m.mlm_head_ = nn::Linear::create(store, "mlm.head", cc.dim, d.vocab, rng);
  m.vtm_head_ = nn::Linear::create(store, "vtm.head", cc.dim, 2, rng);
  return m;
}

EncodedText VideoLanguageModel::encode_text(const data::TextBatch& batch) const {
  const std::size_t B = batch.batch, M = batch.sentences, L = batch.max_tokens;
  if (M != config_.data.clips || L != config_.data.max_tokens) {
    throw std::invalid_argument("encode_text: batch has " + std::to_string(M) + " sentences of " + std::to_string(L) +
                                " tokens, model expects " + std::to_string(config_.data.clips) + " of " +
                                std::to_string(config_.data.max_tokens));
  }
  batch.validate(vocab_);
  const std::size_t D = config_.model.text.dim;

  // Part 1: every sentence is its own attention group.
  std::vector<std::size_t> ids(batch.ids.begin(), batch.ids.end());
  DiffArray x = engine::reshape(engine::embedding(tok_emb_, ids), {B * M, L, D});
  x = text_emb_norm_(engine::add(x, pos_emb_));
  nn::AttentionMask mask1{batch.pad, {}};
  for (const auto& block : part1_) x = block(x, mask1);

  EncodedText out;
  DiffArray cls = engine::reshape(engine::slice(part1_norm_(x), 1, 0, 1), {B, M, D});
  out.part1_cls = cls;
  out.sentence_reps = engine::l2_normalize(head_sentence_(cls));

  // Part 2: sentence segments, a global [CLS] averaged from the sentence
  // [CLS] vectors, attention over the whole paragraph.
  DiffArray seg = engine::embedding(seg_emb_, iota_mod(M * L, L, M));  // [M*L, D]
  DiffArray words = engine::add(engine::reshape(x, {B, M * L, D}), seg);
  DiffArray global = engine::reshape(engine::mean(cls, 1), {B, 1, D});
  DiffArray y = engine::concat({global, words}, 1);
  out.pad.assign(B * (1 + M * L), 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < M * L; ++i) out.pad[b * (1 + M * L) + 1 + i] = batch.pad[b * M * L + i];
  nn::AttentionMask mask2{out.pad, {}};
  for (const auto& block : part2_) y = block(y, mask2);
  y = part2_norm_(y);
  out.tokens = y;
  out.paragraph_rep = engine::l2_normalize(head_paragraph_(engine::reshape(engine::slice(y, 1, 0, 1), {B, D})));
  return out;
}

EncodedVideo VideoLanguageModel::encode_video(const data::VideoBatch& batch) const {
  const auto& d = config_.data;
  const auto& shape = batch.patches.shape();
  if (batch.patches.rank() != 5 || shape[1] != d.frames() || shape[2] != d.height || shape[3] != d.width ||
      shape[4] != d.patch_dim || batch.clips != d.clips) {
    throw std::invalid_argument("encode_video: batch " + engine::shape_str(shape) + " does not match the configured " +
                                std::to_string(d.frames()) + " frames of " + std::to_string(d.height) + "x" +
                                std::to_string(d.width) + "x" + std::to_string(d.patch_dim) + " patches");
  }
  const std::size_t B = shape[0], T = d.frames();

  // Positions enter only through the per-window relative bias.
  DiffArray x;
  {
    engine::MacCategory cat("patch_embed");
    x = patch_embed_(batch.patches);  // [B, T, H, W, d0]
  }

  EncodedVideo out;
  out.clip_stage = clip_stage_;
  for (const VideoStage& stage : stages_) {
    if (stage.merge_norm) {
      engine::MacCategory cat("merge");
      x = (*stage.merge_proj)((*stage.merge_norm)(gather_2x2(x)));
    }
    const attention::WindowSpec spec{stage.spec.temporal_window, stage.spec.spatial_h, stage.spec.spatial_w, 0};
    for (const WindowBlock& block : stage.blocks) {
      x = engine::add(x, attention::windowed_mha({block.norm1(x)}, spec, block.attention).a);
      engine::MacCategory cat("feed_forward");
      x = engine::add(x, block.ffn(block.norm2(x)));
    }
    out.stage_outputs.push_back(x);
  }

  // Clip representations: spatially pooled clip-stage features averaged per clip.
  DiffArray c = clip_norm_(out.stage_outputs[clip_stage_]);
  for (std::size_t i = 0; i < config_.model.video.clip_pool_times; ++i) c = engine::avg_pool2d(c, 2, 2);
  const std::size_t per_clip = d.frames_per_clip * c.dim(2) * c.dim(3);
  c = engine::mean(engine::reshape(c, {B, d.clips, per_clip, c.dim(4)}), 2);
  engine::MacCategory head("head");
  out.clip_reps = engine::l2_normalize(head_clip_(c));

  DiffArray f = video_norm_(x);
  out.tokens = f;
  DiffArray pooled = engine::mean(engine::reshape(f, {B, T * f.dim(2) * f.dim(3), f.dim(4)}), 1);
  out.video_rep = engine::l2_normalize(head_video_(pooled));
  return out;
}

CrossOutput VideoLanguageModel::encode_cross(const DiffArray& text_tokens, const std::vector<std::uint8_t>& text_pad,
                                             const DiffArray& video_tokens, bool mask_video) const {
  const std::size_t B = text_tokens.dim(0), St = text_tokens.dim(1);
  const auto& cc = config_.model.cross;
  if (text_pad.size() != B * St) throw std::invalid_argument("encode_cross: text pad mask size mismatch");

  CrossOutput out;
  out.text_tokens = St;
  DiffArray seq = engine::add(cross_text_in_(text_tokens),
                              engine::reshape(engine::slice(cross_type_emb_, 0, 0, 1), {cc.dim}));
  std::vector<std::uint8_t> keys;
  if (video_tokens.defined()) {
    if (video_tokens.rank() != 5 || video_tokens.dim(0) != B)
      throw std::invalid_argument("encode_cross: video tokens " + engine::shape_str(video_tokens.shape()) +
                                  " do not match a text batch of " + std::to_string(B));
    const std::size_t T = video_tokens.dim(1);
    DiffArray v = engine::max_pool2d(video_tokens, cc.pool_h, cc.pool_w);  // [B, T, h', w', C]
    const std::size_t per_frame = v.dim(2) * v.dim(3);
    v = cross_video_in_(engine::reshape(v, {B, T * per_frame, v.dim(4)}));
    DiffArray pos = engine::add(engine::embedding(cross_frame_emb_, iota_mod(T * per_frame, per_frame, T)),
                                engine::reshape(engine::slice(cross_type_emb_, 0, 1, 1), {cc.dim}));
    v = engine::add(v, pos);
    out.video_tokens = T * per_frame;
    seq = engine::concat({seq, v}, 1);
    for (std::size_t b = 0; b < B; ++b) {
      keys.insert(keys.end(), text_pad.begin() + b * St, text_pad.begin() + (b + 1) * St);
      keys.insert(keys.end(), out.video_tokens, mask_video ? 1 : 0);
    }
  } else {
    keys = text_pad;
  }
  nn::AttentionMask mask{keys, {}};
  for (const auto& block : cross_blocks_) seq = block(seq, mask);
  seq = cross_norm_(seq);
  out.tokens = seq;
  out.cls = engine::reshape(engine::slice(seq, 1, 0, 1), {B, cc.dim});
  return out;
}

CrossOutput VideoLanguageModel::encode_cross(const EncodedText& text, const EncodedVideo& video) const {
  return encode_cross(text.tokens, text.pad, video.tokens);
}

DiffArray VideoLanguageModel::mlm_logits(const CrossOutput& cross, const std::vector<std::size_t>& token_index) const {
  const std::size_t B = cross.tokens.dim(0), S = cross.tokens.dim(1), D = cross.tokens.dim(2);
  const std::size_t ML = config_.data.clips * config_.data.max_tokens;
  std::vector<std::size_t> rows;
  rows.reserve(token_index.size());
  for (std::size_t i : token_index) {
    if (i >= B * ML) throw std::out_of_range("mlm_logits: position " + std::to_string(i) + " outside the batch");
    rows.push_back((i / ML) * S + 1 + i % ML);
  }
  return mlm_head_(engine::index_select(engine::reshape(cross.tokens, {B * S, D}), rows));
}

DiffArray VideoLanguageModel::vtm_logits(const CrossOutput& cross) const { return vtm_head_(cross.cls); }

}  // namespace htwa::encoders
