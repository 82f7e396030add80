#include "htwa/attention.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace htwa::attention {

using engine::DiffArray;

namespace {

[[noreturn]] void schedule_error(std::size_t stage, const std::string& what) {
  throw std::invalid_argument("schedule stage " + std::to_string(stage) + ": " + what);
}

}  // namespace

WindowSchedule WindowSchedule::with_windows(const std::vector<std::size_t>& windows, std::size_t dim,
                                            std::size_t heads, std::size_t layers_per_stage) {
  WindowSchedule s;
  for (std::size_t w : windows) {
    StageSpec st;
    st.layers = layers_per_stage;
    st.dim = dim;
    st.heads = heads;
    st.temporal_window = w;
    s.stages.push_back(st);
  }
  return s;
}

std::vector<std::size_t> WindowSchedule::temporal_windows() const {
  std::vector<std::size_t> out;
  for (const auto& st : stages) out.push_back(st.temporal_window);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> WindowSchedule::stage_grids(std::size_t height,
                                                                           std::size_t width) const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& st : stages) {
    if (st.merge > 1) {
      height /= st.merge;
      width /= st.merge;
    }
    out.emplace_back(height, width);
  }
  return out;
}

void WindowSchedule::validate(std::size_t frames, std::size_t height, std::size_t width) const {
  if (stages.empty()) throw std::invalid_argument("schedule: no stages");
  if (frames == 0) throw std::invalid_argument("schedule: zero frames");
  std::size_t prev_window = 0;
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& st = stages[i];
    if (st.layers == 0) schedule_error(i, "needs at least one layer");
    if (st.heads == 0 || st.dim % st.heads != 0)
      schedule_error(i, "dim " + std::to_string(st.dim) + " not divisible by " + std::to_string(st.heads) + " heads");
    if (st.temporal_window == 0 || frames % st.temporal_window != 0)
      schedule_error(i, "temporal window " + std::to_string(st.temporal_window) + " does not divide " +
                            std::to_string(frames) + " frames");
    if (st.temporal_window < prev_window) schedule_error(i, "temporal windows must be non-decreasing");
    prev_window = st.temporal_window;
    if (st.merge != 1 && st.merge != 2) schedule_error(i, "merge factor must be 1 or 2");
    if (i == 0 && st.merge != 1) schedule_error(i, "the first stage cannot merge patches");
    if (st.merge == 2) {
      if (h % 2 != 0 || w % 2 != 0)
        schedule_error(i, "cannot merge a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
      h /= 2;
      w /= 2;
    } else if (i > 0 && st.dim != stages[i - 1].dim) {
      schedule_error(i, "changing dim requires a patch merge");
    }
    const std::size_t sh = st.spatial_h == 0 ? h : st.spatial_h;
    const std::size_t sw = st.spatial_w == 0 ? w : st.spatial_w;
    if (sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0)
      schedule_error(i, "spatial window " + std::to_string(sh) + "x" + std::to_string(sw) + " does not tile " +
                            std::to_string(h) + "x" + std::to_string(w));
  }
  if (stages.back().temporal_window != frames)
    throw std::invalid_argument("schedule: final temporal window " + std::to_string(stages.back().temporal_window) +
                                " must equal the frame count " + std::to_string(frames));
}

WindowGeometry WindowGeometry::of(const TokenGrid& grid, const WindowSpec& spec) {
  if (grid.values.rank() != 5)
    throw std::invalid_argument("token grid must be [B, T, H, W, C], got " + engine::shape_str(grid.values.shape()));
  WindowGeometry g{grid.batch(), grid.frames(), grid.height(), grid.width(), grid.channels(),
                   spec.temporal, spec.spatial_h == 0 ? grid.height() : spec.spatial_h,
                   spec.spatial_w == 0 ? grid.width() : spec.spatial_w};
  if (g.wt == 0 || g.frames % g.wt != 0)
    throw std::invalid_argument("temporal window " + std::to_string(g.wt) + " does not divide " +
                                std::to_string(g.frames) + " frames");
  if (g.height % g.wh != 0 || g.width % g.ww != 0)
    throw std::invalid_argument("spatial window " + std::to_string(g.wh) + "x" + std::to_string(g.ww) +
                                " does not tile " + std::to_string(g.height) + "x" + std::to_string(g.width));
  return g;
}

DiffArray partition_windows(const TokenGrid& grid, const WindowSpec& spec) {
  const auto g = WindowGeometry::of(grid, spec);
  DiffArray x = engine::reshape(grid.values, {g.batch, g.frames / g.wt, g.wt, g.height / g.wh, g.wh,
                                              g.width / g.ww, g.ww, g.channels});
  x = engine::permute(x, {0, 1, 3, 5, 2, 4, 6, 7});
  return engine::reshape(x, {g.windows(), g.tokens_per_window(), g.channels});
}

std::vector<DiffArray> window_blocks(const TokenGrid& grid, const WindowSpec& spec) {
  DiffArray all = partition_windows(grid, spec);
  std::vector<DiffArray> out;
  for (std::size_t i = 0; i < all.dim(0); ++i) out.push_back(engine::slice(all, 0, i, 1));
  return out;
}

TokenGrid merge_windows(const DiffArray& windows, const WindowGeometry& g) {
  DiffArray x = engine::reshape(windows, {g.batch, g.frames / g.wt, g.height / g.wh, g.width / g.ww, g.wt, g.wh,
                                          g.ww, g.channels});
  x = engine::permute(x, {0, 1, 4, 2, 5, 3, 6, 7});
  return {engine::reshape(x, {g.batch, g.frames, g.height, g.width, g.channels})};
}

std::vector<std::size_t> relative_position_index(std::size_t wt, std::size_t wh, std::size_t ww) {
  const std::size_t s = wt * wh * ww;
  const std::size_t span_h = 2 * wh - 1, span_w = 2 * ww - 1;
  std::vector<std::size_t> idx(s * s);
  for (std::size_t q = 0; q < s; ++q) {
    const std::size_t qt = q / (wh * ww), qh = (q / ww) % wh, qw = q % ww;
    for (std::size_t k = 0; k < s; ++k) {
      const std::size_t kt = k / (wh * ww), kh = (k / ww) % wh, kw = k % ww;
      idx[q * s + k] = ((qt + wt - 1 - kt) * span_h + (qh + wh - 1 - kh)) * span_w + (qw + ww - 1 - kw);
    }
  }
  return idx;
}

WindowAttention WindowAttention::create(ParamStore& store, const std::string& path, std::size_t dim,
                                        std::size_t heads, std::size_t wt, std::size_t wh, std::size_t ww,
                                        Rng& rng) {
  WindowAttention w;
  w.mha = nn::MultiHeadAttention::create(store, path, dim, heads, rng);
  const std::size_t rows = (2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1);
  w.bias_table = store.create(path + ".rel_bias", {rows, heads}, ParamStore::Init::kNormal, rng, 0.02);
  w.wt = wt;
  w.wh = wh;
  w.ww = ww;
  return w;
}

DiffArray WindowAttention::relative_bias() const {
  const std::size_t s = wt * wh * ww;
  const std::size_t heads = mha.heads;
  DiffArray b = engine::index_select(bias_table, relative_position_index(wt, wh, ww));  // [S*S, h]
  return engine::reshape(engine::permute(b, {1, 0}), {heads, s, s});
}

DiffArray AttentionOutput::piece(std::size_t window) const { return engine::slice(pieces, 0, window, 1); }

AttentionOutput windowed_mha(const TokenGrid& tokens, const WindowSpec& spec, const WindowAttention& params) {
  const auto g = WindowGeometry::of(tokens, spec);
  if (g.wt != params.wt || g.wh != params.wh || g.ww != params.ww) {
    throw std::invalid_argument("windowed_mha: parameters built for window " + std::to_string(params.wt) + "x" +
                                std::to_string(params.wh) + "x" + std::to_string(params.ww) + ", spec is " +
                                std::to_string(g.wt) + "x" + std::to_string(g.wh) + "x" + std::to_string(g.ww));
  }
  if (g.channels % params.mha.heads != 0) {
    throw std::invalid_argument("windowed_mha: dim " + std::to_string(g.channels) + " not divisible by " +
                                std::to_string(params.mha.heads) + " heads");
  }
  AttentionOutput out;
  out.pieces = params.mha(partition_windows(tokens, spec), {}, params.relative_bias());
  out.a = merge_windows(out.pieces, g).values;
  return out;
}

std::vector<std::size_t> receptive_field(const WindowSchedule& schedule, std::size_t frames, std::size_t frame,
                                         std::size_t stage_count) {
  if (frame >= frames) throw std::out_of_range("receptive_field: frame " + std::to_string(frame) + " >= " + std::to_string(frames));
  stage_count = std::min(stage_count, schedule.stages.size());
  std::set<std::size_t> current{frame};
  // Walk from the last applied stage back to the input: an input frame
  // reaches the output iff a chain of shared windows connects them.
  for (std::size_t s = stage_count; s-- > 0;) {
    const std::size_t w = schedule.stages[s].temporal_window;
    std::set<std::size_t> next;
    for (std::size_t f : current) {
      const std::size_t start = (f / w) * w;
      for (std::size_t g = start; g < std::min(start + w, frames); ++g) next.insert(g);
    }
    current = std::move(next);
  }
  return {current.begin(), current.end()};
}

}  // namespace htwa::attention
