#pragma once

// Temporal-window self-attention over video token grids and the
// hierarchical window schedule that drives the video encoder.
//
// A TokenGrid is [batch, time, height, width, dim]. A window covers
// `temporal` consecutive frames and a spatial_h x spatial_w patch block;
// attention is computed independently inside every window and the window
// outputs are written back to their original positions.

#include <cstddef>
#include <string>
#include <vector>

#include "htwa/engine.hpp"
#include "htwa/nn.hpp"
#include "htwa/params.hpp"

namespace htwa::attention {

struct TokenGrid {
  engine::DiffArray values;  // [B, T, H, W, C]

  std::size_t batch() const { return values.dim(0); }
  std::size_t frames() const { return values.dim(1); }
  std::size_t height() const { return values.dim(2); }
  std::size_t width() const { return values.dim(3); }
  std::size_t channels() const { return values.dim(4); }
};

struct WindowSpec {
  std::size_t temporal = 1;
  std::size_t spatial_h = 0;  // 0: the full grid height
  std::size_t spatial_w = 0;  // 0: the full grid width
  std::size_t layer = 0;
};

struct StageSpec {
  std::size_t layers = 1;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t temporal_window = 2;
  std::size_t spatial_h = 0;  // 0: full
  std::size_t spatial_w = 0;
  std::size_t merge = 1;  // spatial patch-merge factor applied before the stage (1 or 2)
};

struct WindowSchedule {
  std::vector<StageSpec> stages;

  // Same dims/heads/merges for every stage; only the temporal windows differ.
  static WindowSchedule with_windows(const std::vector<std::size_t>& windows, std::size_t dim,
                                     std::size_t heads, std::size_t layers_per_stage = 1);

  std::vector<std::size_t> temporal_windows() const;
  // Spatial size (h, w) of the grid entering each stage.
  std::vector<std::pair<std::size_t, std::size_t>> stage_grids(std::size_t height, std::size_t width) const;

  // Throws std::invalid_argument naming the offending stage.
  void validate(std::size_t frames, std::size_t height, std::size_t width) const;
};

struct WindowGeometry {
  std::size_t batch, frames, height, width, channels;
  std::size_t wt, wh, ww;

  static WindowGeometry of(const TokenGrid& grid, const WindowSpec& spec);
  std::size_t windows() const { return batch * (frames / wt) * (height / wh) * (width / ww); }
  std::size_t tokens_per_window() const { return wt * wh * ww; }
};

// [num_windows, tokens_per_window, C], windows ordered (batch, t, h, w) and
// tokens inside a window ordered (t, h, w). Rejects non-divisible sizes.
engine::DiffArray partition_windows(const TokenGrid& grid, const WindowSpec& spec);
std::vector<engine::DiffArray> window_blocks(const TokenGrid& grid, const WindowSpec& spec);
TokenGrid merge_windows(const engine::DiffArray& windows, const WindowGeometry& geometry);

// Index into the relative-bias table for every (query, key) pair of a
// wt x wh x ww window; table rows = (2wt-1)(2wh-1)(2ww-1).
std::vector<std::size_t> relative_position_index(std::size_t wt, std::size_t wh, std::size_t ww);

struct WindowAttention {
  nn::MultiHeadAttention mha;
  engine::DiffArray bias_table;  // [(2wt-1)(2wh-1)(2ww-1), heads]
  std::size_t wt = 1, wh = 1, ww = 1;

  static WindowAttention create(ParamStore& store, const std::string& path, std::size_t dim,
                                std::size_t heads, std::size_t wt, std::size_t wh, std::size_t ww,
                                Rng& rng);
  // [heads, S, S] bias for one window.
  engine::DiffArray relative_bias() const;
};

struct AttentionOutput {
  engine::DiffArray a;       // [B, T, H, W, C]
  engine::DiffArray pieces;  // [num_windows, tokens_per_window, C] before reassembly

  engine::DiffArray piece(std::size_t window) const;
};

AttentionOutput windowed_mha(const TokenGrid& tokens, const WindowSpec& spec, const WindowAttention& params);

// Input frames able to influence output frame `frame` after running stages
// [0, stage_count) of the schedule (all stages by default). Sorted ascending.
std::vector<std::size_t> receptive_field(const WindowSchedule& schedule, std::size_t frames,
                                         std::size_t frame, std::size_t stage_count = SIZE_MAX);

}  // namespace htwa::attention
