#pragma once

// Text encoder (sentence-local part 1, paragraph-wide part 2), hierarchical
// temporal-window video encoder, cross-modal encoder and the projection
// heads into the shared contrastive space.
//
// Parameter groups (first path component): "text", "video" and "head" form
// the two-stream retrieval model; "cross", "mlm" and "vtm" are the fusion
// model trained in the second stage.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "htwa/attention.hpp"
#include "htwa/config.hpp"
#include "htwa/data.hpp"
#include "htwa/nn.hpp"
#include "htwa/params.hpp"

namespace htwa::encoders {

struct EncodedText {
  engine::DiffArray sentence_reps;   // [B, M, E], unit rows
  engine::DiffArray paragraph_rep;   // [B, E], unit rows
  engine::DiffArray part1_cls;       // [B, M, Dt] before projection
  engine::DiffArray tokens;          // [B, 1 + M*L, Dt] part-2 outputs, global [CLS] first
  std::vector<std::uint8_t> pad;     // [B, 1 + M*L], 1 at padding
};

struct EncodedVideo {
  engine::DiffArray clip_reps;                // [B, M, E], unit rows
  engine::DiffArray video_rep;                // [B, E], unit rows
  engine::DiffArray tokens;                   // [B, T, h, w, C] final-stage outputs after the last norm
  std::vector<engine::DiffArray> stage_outputs;  // [B, T, h_s, w_s, C_s] per stage
  std::size_t clip_stage = 0;
};

struct CrossOutput {
  engine::DiffArray tokens;  // [B, S, Dc]
  engine::DiffArray cls;     // [B, Dc]
  std::size_t text_tokens = 0;
  std::size_t video_tokens = 0;
};

struct WindowBlock {
  nn::LayerNorm norm1;
  attention::WindowAttention attention;
  nn::LayerNorm norm2;
  nn::FeedForward ffn;
};

struct VideoStage {
  attention::StageSpec spec;
  std::optional<nn::LayerNorm> merge_norm;  // patch merging, present when spec.merge == 2
  std::optional<nn::Linear> merge_proj;
  std::vector<WindowBlock> blocks;
};

// Sequence lengths and grid sizes implied by a configuration.
struct ShapePlan {
  std::size_t text_part1_tokens = 0;        // L per sentence group
  std::size_t text_part2_tokens = 0;        // 1 + M*L
  std::vector<std::pair<std::size_t, std::size_t>> stage_grids;
  std::vector<std::size_t> stage_dims;
  std::size_t clip_stage = 0;
  std::size_t clip_reps = 0;                // M
  std::size_t cross_video_tokens_per_frame = 0;
  std::size_t cross_tokens = 0;             // 1 + M*L + T*S'
};

ShapePlan plan_shapes(const Config& config);

class VideoLanguageModel {
 public:
  // Registers every parameter in `store`, initialised from model.init_seed.
  static VideoLanguageModel create(const Config& config, ParamStore& store);

  EncodedText encode_text(const data::TextBatch& batch) const;
  EncodedVideo encode_video(const data::VideoBatch& batch) const;
  // Joint encoding of text part-2 outputs (with their padding) and video
  // tokens [B, T, h, w, C]. mask_video hides every video key. Passing no
  // video runs the text-only sequence.
  CrossOutput encode_cross(const engine::DiffArray& text_tokens, const std::vector<std::uint8_t>& text_pad,
                           const engine::DiffArray& video_tokens, bool mask_video = false) const;
  CrossOutput encode_cross(const EncodedText& text, const EncodedVideo& video) const;

  // [positions, vocab.content] logits at flat [B, M, L] text positions (the
  // indexing of data::MaskedBatch::positions).
  engine::DiffArray mlm_logits(const CrossOutput& cross, const std::vector<std::size_t>& token_index) const;
  engine::DiffArray vtm_logits(const CrossOutput& cross) const;  // [B, 2]

  const Config& config() const { return config_; }
  std::size_t clip_stage() const { return clip_stage_; }
  const std::vector<VideoStage>& video_stages() const { return stages_; }

  // Frames the video encoder expects; batches with more frames per clip are
  // subsampled by the caller.
  std::size_t frames() const { return config_.data.frames(); }

 private:
  Config config_;
  Vocabulary vocab_;
  std::size_t clip_stage_ = 0;

  // text
  engine::DiffArray tok_emb_, pos_emb_, seg_emb_;
  nn::LayerNorm text_emb_norm_, part1_norm_, part2_norm_;
  std::vector<nn::TransformerBlock> part1_, part2_;

  // video
  nn::Linear patch_embed_;
  std::vector<VideoStage> stages_;
  nn::LayerNorm clip_norm_, video_norm_;

  // projection heads
  nn::Linear head_sentence_, head_paragraph_, head_clip_, head_video_;

  // cross
  nn::Linear cross_text_in_, cross_video_in_;
  engine::DiffArray cross_type_emb_, cross_frame_emb_;
  std::vector<nn::TransformerBlock> cross_blocks_;
  nn::LayerNorm cross_norm_;
  nn::Linear mlm_head_, vtm_head_;
};

}  // namespace htwa::encoders
