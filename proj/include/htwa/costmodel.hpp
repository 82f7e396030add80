#pragma once

// Analytic multiply-add counts of the temporal-window video encoder.
//
// Only matrix products are counted (one multiply-add per inner-product
// term); softmax, normalisation, activations and additions are free. The
// counts reproduce engine::MacCounter exactly for one video of
// VideoLanguageModel::encode_video, category by category.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "htwa/attention.hpp"

namespace htwa::costmodel {

struct AttentionCost {
  std::uint64_t projection = 0;        // q, k, v and output: 4 T S d^2
  std::uint64_t attention_scores = 0;  // q k^T inside every window
  std::uint64_t attention_values = 0;  // softmax(.) v inside every window
  std::uint64_t total() const { return projection + attention_scores + attention_values; }
  bool operator==(const AttentionCost&) const = default;
};

// One attention layer over T frames of S tokens with d channels and
// temporal window w. `window_tokens` is the spatial window size in tokens
// (0: the whole frame, S). Rejects w not dividing T and window_tokens not
// dividing S. The head count does not change the count.
AttentionCost attention_flops(std::size_t frames, std::size_t tokens_per_frame, std::size_t dim, std::size_t heads,
                              std::size_t window, std::size_t window_tokens = 0);

struct StageCost {
  std::size_t stage = 0;
  std::size_t frames = 0, height = 0, width = 0, dim = 0, heads = 0, layers = 0;
  std::size_t window = 0, spatial_h = 0, spatial_w = 0, merge = 1;
  std::uint64_t merge_macs = 0;  // 2x2 patch-merge projection, 0 without merge
  std::uint64_t projection = 0;
  std::uint64_t attention_scores = 0;
  std::uint64_t attention_values = 0;
  std::uint64_t feed_forward = 0;
  std::uint64_t peak_activation = 0;  // largest single intermediate, in elements

  std::uint64_t attention() const { return projection + attention_scores + attention_values; }
  std::uint64_t total() const { return merge_macs + attention() + feed_forward; }
  bool operator==(const StageCost&) const = default;
};

struct CostOptions {
  std::size_t ffn_ratio = 4;
  std::size_t patch_dim = 0;  // > 0: count the patch embedding
  std::size_t embed_dim = 0;  // > 0: count the clip and video projection heads
  std::size_t clips = 1;      // clip representations projected by the clip head
  std::size_t clip_stage = 0;
};

struct CostReport {
  std::vector<StageCost> stages;
  std::uint64_t patch_embed = 0;
  std::uint64_t heads = 0;

  std::uint64_t merge() const;
  std::uint64_t projection() const;
  std::uint64_t attention_scores() const;
  std::uint64_t attention_values() const;
  std::uint64_t feed_forward() const;
  std::uint64_t attention() const { return projection() + attention_scores() + attention_values(); }
  std::uint64_t total() const;
  std::uint64_t peak_activation() const;
  bool operator==(const CostReport&) const = default;
};

// Cost of one video of `frames` frames on a height x width patch grid.
// Throws std::invalid_argument for a schedule that does not fit.
CostReport schedule_cost(const attention::WindowSchedule& schedule, std::size_t frames, std::size_t height,
                         std::size_t width, const CostOptions& options = {});

// The same stage dims, heads and merges with every temporal window set to `window`.
attention::WindowSchedule fixed_window(const attention::WindowSchedule& schedule, std::size_t window);

// One row per stage; columns listed in the header line.
std::string cost_csv(const CostReport& report);
// Right-aligned text table with per-category totals.
std::string cost_table(const CostReport& report);

}  // namespace htwa::costmodel
