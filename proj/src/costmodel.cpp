#include "htwa/costmodel.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace htwa::costmodel {

AttentionCost attention_flops(std::size_t frames, std::size_t tokens_per_frame, std::size_t dim, std::size_t heads,
                              std::size_t window, std::size_t window_tokens) {
  if (window == 0 || frames % window != 0)
    throw std::invalid_argument("attention_flops: window " + std::to_string(window) + " does not divide " +
                                std::to_string(frames) + " frames");
  if (window_tokens == 0) window_tokens = tokens_per_frame;
  if (tokens_per_frame % window_tokens != 0)
    throw std::invalid_argument("attention_flops: spatial window of " + std::to_string(window_tokens) +
                                " tokens does not divide " + std::to_string(tokens_per_frame));
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("attention_flops: heads must divide dim");
  const std::uint64_t T = frames, S = tokens_per_frame, d = dim;
  AttentionCost c;
  c.projection = 4 * T * S * d * d;
  // (T S) queries, each against the w * window_tokens keys of its window.
  c.attention_scores = T * S * window * window_tokens * d;
  c.attention_values = c.attention_scores;
  return c;
}

std::uint64_t CostReport::merge() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n += s.merge_macs;
  return n;
}
std::uint64_t CostReport::projection() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n += s.projection;
  return n;
}
std::uint64_t CostReport::attention_scores() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n += s.attention_scores;
  return n;
}
std::uint64_t CostReport::attention_values() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n += s.attention_values;
  return n;
}
std::uint64_t CostReport::feed_forward() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n += s.feed_forward;
  return n;
}
std::uint64_t CostReport::total() const {
  std::uint64_t n = patch_embed + heads;
  for (const auto& s : stages) n += s.total();
  return n;
}
std::uint64_t CostReport::peak_activation() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n = std::max(n, s.peak_activation);
  return n;
}

CostReport schedule_cost(const attention::WindowSchedule& schedule, std::size_t frames, std::size_t height,
                         std::size_t width, const CostOptions& options) {
  // Unlike an encoder schedule, the last window need not span every frame,
  // so fixed-window variants can be costed too.
  if (schedule.stages.empty()) throw std::invalid_argument("schedule_cost: no stages");
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < schedule.stages.size(); ++i) {
    const auto& st = schedule.stages[i];
    const std::string where = "schedule_cost: stage " + std::to_string(i) + ": ";
    if (st.merge != 1 && st.merge != 2) throw std::invalid_argument(where + "merge factor must be 1 or 2");
    if (st.merge == 2 && (i == 0 || h % 2 != 0 || w % 2 != 0))
      throw std::invalid_argument(where + "cannot merge a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
    if (st.merge == 1 && i > 0 && st.dim != schedule.stages[i - 1].dim)
      throw std::invalid_argument(where + "changing dim requires a patch merge");
    h /= st.merge;
    w /= st.merge;
    if ((st.spatial_h != 0 && h % st.spatial_h != 0) || (st.spatial_w != 0 && w % st.spatial_w != 0))
      throw std::invalid_argument(where + "spatial window does not tile the grid");
  }
  if (options.ffn_ratio == 0) throw std::invalid_argument("schedule_cost: ffn_ratio must be >= 1");
  const auto grids = schedule.stage_grids(height, width);
  CostReport report;
  const std::uint64_t T = frames;
  for (std::size_t i = 0; i < schedule.stages.size(); ++i) {
    const auto& spec = schedule.stages[i];
    const auto [gh, gw] = grids[i];
    StageCost s;
    s.stage = i;
    s.frames = frames;
    s.height = gh;
    s.width = gw;
    s.dim = spec.dim;
    s.heads = spec.heads;
    s.layers = spec.layers;
    s.window = spec.temporal_window;
    s.spatial_h = spec.spatial_h == 0 ? gh : spec.spatial_h;
    s.spatial_w = spec.spatial_w == 0 ? gw : spec.spatial_w;
    s.merge = spec.merge;
    const std::uint64_t S = gh * gw, d = spec.dim;
    const std::uint64_t window_tokens = s.spatial_h * s.spatial_w;
    if (spec.merge == 2) {
      const std::uint64_t prev = schedule.stages[i - 1].dim;
      s.merge_macs = T * S * 4 * prev * d;
      s.peak_activation = T * S * 4 * prev;
    }
    const AttentionCost layer = attention_flops(frames, S, d, spec.heads, spec.temporal_window, window_tokens);
    const std::uint64_t hidden = options.ffn_ratio * d;
    s.projection = spec.layers * layer.projection;
    s.attention_scores = spec.layers * layer.attention_scores;
    s.attention_values = spec.layers * layer.attention_values;
    s.feed_forward = spec.layers * 2 * T * S * d * hidden;
    if (spec.layers > 0) {
      const std::uint64_t scores = spec.heads * T * S * spec.temporal_window * window_tokens;
      s.peak_activation = std::max({s.peak_activation, T * S * d, scores, T * S * hidden});
    }
    report.stages.push_back(s);
  }
  if (options.patch_dim > 0) report.patch_embed = T * height * width * options.patch_dim * schedule.stages[0].dim;
  if (options.embed_dim > 0) {
    if (options.clip_stage >= schedule.stages.size()) throw std::invalid_argument("schedule_cost: clip_stage out of range");
    report.heads = options.clips * schedule.stages[options.clip_stage].dim * options.embed_dim +
                   schedule.stages.back().dim * options.embed_dim;
  }
  return report;
}

attention::WindowSchedule fixed_window(const attention::WindowSchedule& schedule, std::size_t window) {
  attention::WindowSchedule out = schedule;
  for (auto& s : out.stages) s.temporal_window = window;
  return out;
}

std::string cost_csv(const CostReport& report) {
  std::ostringstream os;
  os << "stage,frames,height,width,dim,heads,layers,window,spatial_h,spatial_w,merge,merge_macs,projection,"
        "attention_scores,attention_values,feed_forward,total,peak_activation\n";
  for (const auto& s : report.stages) {
    os << s.stage << ',' << s.frames << ',' << s.height << ',' << s.width << ',' << s.dim << ',' << s.heads << ','
       << s.layers << ',' << s.window << ',' << s.spatial_h << ',' << s.spatial_w << ',' << s.merge << ','
       << s.merge_macs << ',' << s.projection << ',' << s.attention_scores << ',' << s.attention_values << ','
       << s.feed_forward << ',' << s.total() << ',' << s.peak_activation << '\n';
  }
  return os.str();
}

std::string cost_table(const CostReport& report) {
  const std::vector<std::string> header{"stage", "window", "grid",   "dim",    "merge",
                                        "proj",  "scores", "values", "ffn",    "total"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : report.stages) {
    rows.push_back({std::to_string(s.stage), std::to_string(s.window),
                    std::to_string(s.frames) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width),
                    std::to_string(s.dim), std::to_string(s.merge_macs), std::to_string(s.projection),
                    std::to_string(s.attention_scores), std::to_string(s.attention_values),
                    std::to_string(s.feed_forward), std::to_string(s.total())});
  }
  rows.push_back({"all", "", "", "", std::to_string(report.merge()), std::to_string(report.projection()),
                  std::to_string(report.attention_scores()), std::to_string(report.attention_values()),
                  std::to_string(report.feed_forward()),
                  std::to_string(report.total() - report.patch_embed - report.heads)});
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  os << "multiply-adds per video (matrix products only)\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      os << std::string(width[c] - cells[c].size(), ' ') << cells[c];
    }
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  os << "patch embedding: " << report.patch_embed << "\n"
     << "projection heads: " << report.heads << "\n"
     << "total: " << report.total() << "\n"
     << "peak activation elements: " << report.peak_activation() << "\n";
  return os.str();
}

}  // namespace htwa::costmodel
