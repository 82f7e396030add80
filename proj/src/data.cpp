#include "htwa/data.hpp"

#include "htwa/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace htwa::data {

using io::Reader;
using io::Writer;

namespace {

constexpr char kMagic[8] = {'H', 'T', 'W', 'A', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

Dims Dims::of(const DataConfig& c) {
  return {c.clips, c.frames_per_clip, c.height, c.width, c.patch_dim, c.max_tokens, c.vocab, c.latent_dim};
}

World World::create(const DataConfig& config) {
  Rng rng(derive_seed(config.seed, 0xA11CE));
  const std::size_t dz = config.latent_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(dz));
  World w;
  w.video_map.resize(config.height * config.width * config.patch_dim * dz);
  for (double& v : w.video_map) v = rng.normal(0.0, sd);
  w.word_map.resize(config.vocab * dz);
  for (double& v : w.word_map) v = rng.normal(0.0, sd);
  return w;
}

PairedSample generate_sample(const DataConfig& c, const World& world, std::uint64_t id) {
  Rng rng(derive_seed(c.seed, 0x5A3F1E, id));
  const std::size_t dz = c.latent_dim, M = c.clips, L = c.max_tokens;
  PairedSample s;
  s.id = id;

  s.topics.resize(M * dz);
  for (std::size_t k = 0; k < dz; ++k) s.topics[k] = rng.normal();
  for (std::size_t m = 1; m < M; ++m) {
    std::vector<double> dir(dz);
    double norm = 0.0;
    for (double& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < dz; ++k)
      s.topics[m * dz + k] = s.topics[(m - 1) * dz + k] + c.walk_step * dir[k] / norm;
  }

  const std::size_t per_frame = c.height * c.width * c.patch_dim;
  s.video.resize(c.frames() * per_frame);
  std::vector<double> clean(per_frame);
  for (std::size_t m = 0; m < M; ++m) {
    const double* z = &s.topics[m * dz];
    for (std::size_t r = 0; r < per_frame; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < dz; ++k) acc += world.video_map[r * dz + k] * z[k];
      clean[r] = acc;
    }
    for (std::size_t f = 0; f < c.frames_per_clip; ++f) {
      double* frame = &s.video[(m * c.frames_per_clip + f) * per_frame];
      for (std::size_t r = 0; r < per_frame; ++r) frame[r] = clean[r] + c.video_noise * rng.normal();
    }
  }

  const Vocabulary vocab{c.vocab};
  s.tokens.assign(M * L, vocab.pad());
  std::vector<double> cdf(c.vocab);
  const std::size_t min_len = std::max<std::size_t>(1, L / 2);
  for (std::size_t m = 0; m < M; ++m) {
    const double* z = &s.topics[m * dz];
    double top = -INFINITY;
    for (std::size_t v = 0; v < c.vocab; ++v) {
      double acc = 0.0;
      for (std::size_t k = 0; k < dz; ++k) acc += world.word_map[v * dz + k] * z[k];
      cdf[v] = c.topic_sharpness * acc;
      top = std::max(top, cdf[v]);
    }
    double total = 0.0;
    for (double& v : cdf) {
      total += std::exp(v - top);
      v = total;
    }
    const std::size_t len = min_len + rng.below(L - min_len);  // content tokens in [min_len, L-1]
    std::uint32_t* sentence = &s.tokens[m * L];
    sentence[0] = vocab.cls();
    for (std::size_t j = 1; j <= len; ++j) {
      const double u = rng.uniform() * total;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      sentence[j] = static_cast<std::uint32_t>(std::min<std::size_t>(it - cdf.begin(), c.vocab - 1));
    }
  }
  return s;
}

Dataset generate(const DataConfig& c) {
  require(c.clips >= 1 && c.frames_per_clip >= 1 && c.height >= 1 && c.width >= 1 && c.patch_dim >= 1,
          "generate: video dims must be positive");
  require(c.max_tokens >= 2, "generate: max_tokens must be >= 2");
  require(c.vocab >= 1 && c.latent_dim >= 1, "generate: vocab and latent_dim must be positive");
  require(c.eval_size >= 1 && c.train_size >= 1, "generate: both splits must be non-empty");
  const World world = World::create(c);
  Dataset d;
  d.dims = Dims::of(c);
  for (std::uint64_t id = 0; id < c.eval_size; ++id) d.eval.push_back(generate_sample(c, world, id));
  for (std::uint64_t id = c.eval_size; id < c.eval_size + c.train_size; ++id)
    d.train.push_back(generate_sample(c, world, id));
  return d;
}

void write_shard(const Dataset& dataset, const std::string& path) {
  const Dims& d = dataset.dims;
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  for (std::size_t v : {d.clips, d.frames_per_clip, d.height, d.width, d.patch_dim, d.max_tokens, d.vocab})
    w.u32(static_cast<std::uint32_t>(v));
  w.u64(dataset.eval.size() + dataset.train.size());
  w.u32(static_cast<std::uint32_t>(d.latent_dim));
  w.u64(dataset.eval.size());
  for (const auto* split : {&dataset.eval, &dataset.train}) {
    for (const PairedSample& s : *split) {
      w.u64(s.id);
      for (double v : s.topics) w.f64(v);
      for (double v : s.video) w.f64(v);
      for (std::uint32_t t : s.tokens) w.u32(t);
    }
  }
  io::write_file(path, w.str());
}

Dataset read_shard(const std::string& path) {
  Reader r(io::read_file(path), path);
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("shard " + path + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("shard " + path + ": unsupported version " + std::to_string(version));
  Dataset d;
  d.dims.clips = r.u32();
  d.dims.frames_per_clip = r.u32();
  d.dims.height = r.u32();
  d.dims.width = r.u32();
  d.dims.patch_dim = r.u32();
  d.dims.max_tokens = r.u32();
  d.dims.vocab = r.u32();
  const std::uint64_t count = r.u64();
  d.dims.latent_dim = r.u32();
  const std::uint64_t eval_count = r.u64();
  if (eval_count > count) throw std::runtime_error("shard " + path + ": eval count exceeds sample count");
  const std::size_t topics = d.dims.clips * d.dims.latent_dim;
  for (std::uint64_t i = 0; i < count; ++i) {
    PairedSample s;
    s.id = r.u64();
    s.topics.resize(topics);
    for (double& v : s.topics) v = r.f64();
    s.video.resize(d.dims.video_size());
    for (double& v : s.video) v = r.f64();
    s.tokens.resize(d.dims.token_count());
    for (std::uint32_t& t : s.tokens) t = r.u32();
    (i < eval_count ? d.eval : d.train).push_back(std::move(s));
  }
  if (!r.done()) throw std::runtime_error("shard " + path + ": trailing bytes");
  return d;
}

// ---------------------------------------------------------------------------

void TextBatch::validate(const Vocabulary& vocab) const {
  require(ids.size() == batch * sentences * max_tokens && pad.size() == ids.size(),
          "text batch: ids/pad size mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab.size())
      throw std::invalid_argument("text batch: token id " + std::to_string(ids[i]) + " >= vocabulary size " +
                                  std::to_string(vocab.size()));
    if (i % max_tokens == 0 && ids[i] != vocab.cls())
      throw std::invalid_argument("text batch: sentence " + std::to_string(i / max_tokens) +
                                  " does not start with [CLS]");
  }
}

TextBatch make_text_batch(const std::vector<const PairedSample*>& samples, const Dims& dims) {
  const Vocabulary vocab{dims.vocab};
  TextBatch t;
  t.batch = samples.size();
  t.sentences = dims.clips;
  t.max_tokens = dims.max_tokens;
  for (const PairedSample* s : samples) {
    require(s->tokens.size() == dims.token_count(), "make_text_batch: sample token count mismatch");
    t.ids.insert(t.ids.end(), s->tokens.begin(), s->tokens.end());
  }
  t.pad.resize(t.ids.size());
  for (std::size_t i = 0; i < t.ids.size(); ++i) t.pad[i] = t.ids[i] == vocab.pad() ? 1 : 0;
  return t;
}

VideoBatch make_video_batch(const std::vector<const PairedSample*>& samples, const Dims& dims) {
  std::vector<double> values;
  values.reserve(samples.size() * dims.video_size());
  for (const PairedSample* s : samples) {
    require(s->video.size() == dims.video_size(), "make_video_batch: sample video size mismatch");
    values.insert(values.end(), s->video.begin(), s->video.end());
  }
  VideoBatch v;
  v.patches = engine::DiffArray({samples.size(), dims.frames(), dims.height, dims.width, dims.patch_dim},
                                std::move(values));
  v.clips = dims.clips;
  v.frames_per_clip = dims.frames_per_clip;
  return v;
}

VideoBatch subsample_frames(const VideoBatch& video, std::size_t per_clip) {
  const std::size_t n = video.frames_per_clip;
  require(per_clip >= 1 && per_clip <= n, "subsample_frames: per_clip must be in [1, frames_per_clip]");
  const auto& shape = video.patches.shape();
  const std::size_t frame_size = shape[2] * shape[3] * shape[4];
  const auto src = video.patches.data();
  std::vector<double> out;
  out.reserve(shape[0] * video.clips * per_clip * frame_size);
  for (std::size_t b = 0; b < shape[0]; ++b) {
    for (std::size_t m = 0; m < video.clips; ++m) {
      for (std::size_t i = 0; i < per_clip; ++i) {
        const std::size_t f = m * n + (2 * i + 1) * n / (2 * per_clip);
        const double* p = src.data() + (b * shape[1] + f) * frame_size;
        out.insert(out.end(), p, p + frame_size);
      }
    }
  }
  VideoBatch v;
  v.patches = engine::DiffArray({shape[0], video.clips * per_clip, shape[2], shape[3], shape[4]}, std::move(out));
  v.clips = video.clips;
  v.frames_per_clip = per_clip;
  return v;
}

MaskedBatch mask_tokens(const TextBatch& batch, const Vocabulary& vocab, double rate, Rng& rng) {
  require(rate > 0.0 && rate < 1.0, "mask_tokens: rate must be in (0, 1)");
  MaskedBatch out;
  out.text = batch;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    const std::uint32_t id = batch.ids[i];
    if (vocab.is_special(id) || !rng.bernoulli(rate)) continue;
    out.positions.push_back(i);
    out.labels.push_back(id);
    const double u = rng.uniform();
    if (u < 0.8) {
      out.text.ids[i] = vocab.mask();
    } else if (u < 0.9) {
      out.text.ids[i] = static_cast<std::uint32_t>(rng.below(vocab.content));
    }
  }
  return out;
}

VtmPairing vtm_pairs(std::size_t batch, double prob, Rng& rng) {
  require(batch >= 2, "vtm_pairs: needs a batch of at least 2 to draw negatives");
  require(prob >= 0.0 && prob <= 1.0, "vtm_pairs: probability must be in [0, 1]");
  VtmPairing p;
  for (std::size_t i = 0; i < batch; ++i) {
    if (rng.bernoulli(prob)) {
      std::size_t j = rng.below(batch - 1);
      if (j >= i) ++j;
      p.video_index.push_back(j);
      p.labels.push_back(0);
    } else {
      p.video_index.push_back(i);
      p.labels.push_back(1);
    }
  }
  return p;
}

}  // namespace htwa::data
