#include "htwa/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "htwa/binary_io.hpp"
#include "htwa/objectives.hpp"

namespace htwa::pipeline {

using engine::DiffArray;

namespace {

constexpr char kCkptMagic[8] = {'H', 'T', 'W', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 0x1001;
constexpr std::uint64_t kShuffleStream = 0x2001;
constexpr std::uint64_t kStepStream = 0x3001;
constexpr std::uint64_t kMaskStream = 0x4001;
constexpr std::uint64_t kPairStream = 0x5001;

bool finite(double v) { return std::isfinite(v); }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Chunks of [0, n) of at most `size` elements; a trailing chunk shorter than
// `min_size` is merged into the previous one.
std::vector<std::pair<std::size_t, std::size_t>> chunks(std::size_t n, std::size_t size, std::size_t min_size) {
  if (size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < n; start += size) out.emplace_back(start, std::min(size, n - start));
  if (out.size() > 1 && out.back().second < min_size) {
    out[out.size() - 2].second += out.back().second;
    out.pop_back();
  }
  return out;
}

std::vector<const data::PairedSample*> pointers(const std::vector<data::PairedSample>& split, std::size_t start,
                                                std::size_t count) {
  std::vector<const data::PairedSample*> out;
  for (std::size_t i = start; i < start + count; ++i) out.push_back(&split[i]);
  return out;
}

// Video tokens of sample video_index[b] placed at row b.
DiffArray gather_video(const DiffArray& tokens, const std::vector<std::size_t>& video_index) {
  engine::Shape shape = tokens.shape();
  const std::size_t rest = tokens.numel() / shape[0];
  DiffArray rows = engine::index_select(engine::reshape(tokens, {shape[0], rest}), video_index);
  shape[0] = video_index.size();
  return engine::reshape(rows, shape);
}

struct FrozenInputs {
  encoders::EncodedText text;
  encoders::EncodedVideo video;
};

FrozenInputs encode_frozen(const TrainState& state, const data::TextBatch& text, const data::VideoBatch& video) {
  engine::NoGradScope no_grad;
  FrozenInputs out{state.model.encode_text(text), state.model.encode_video(video)};
  out.text.tokens = out.text.tokens.detach();
  out.video.tokens = out.video.tokens.detach();
  return out;
}

struct MlmPass {
  DiffArray loss;
  std::size_t predicted = 0;
};

MlmPass mlm_pass(const TrainState& state, const data::TextBatch& text, const DiffArray& video_tokens,
                 std::uint64_t seed) {
  const Vocabulary vocab{state.config.data.vocab};
  Rng rng(seed);
  data::MaskedBatch masked = data::mask_tokens(text, vocab, state.config.loss.mask_rate, rng);
  encoders::EncodedText encoded;
  {
    engine::NoGradScope no_grad;
    encoded = state.model.encode_text(masked.text);
  }
  const DiffArray masked_tokens = encoded.tokens.detach();
  if (masked.positions.empty()) return {objectives::mlm_loss(DiffArray(), {}), 0};
  encoders::CrossOutput cross = state.model.encode_cross(masked_tokens, encoded.pad, video_tokens);
  DiffArray logits = state.model.mlm_logits(cross, masked.positions);
  return {objectives::mlm_loss(logits, masked.labels), masked.positions.size()};
}

struct VtmPass {
  DiffArray logits;
  std::vector<std::size_t> labels;
};

VtmPass vtm_pass(const TrainState& state, const FrozenInputs& in, std::uint64_t seed) {
  Rng rng(seed);
  data::VtmPairing pairing = data::vtm_pairs(in.video.tokens.dim(0), state.config.loss.vtm_replace_prob, rng);
  DiffArray video = gather_video(in.video.tokens, pairing.video_index);
  encoders::CrossOutput cross = state.model.encode_cross(in.text.tokens, in.text.pad, video);
  return {state.model.vtm_logits(cross), std::move(pairing.labels)};
}

}  // namespace

// ---------------------------------------------------------------------------

AdamW::AdamW(const OptimConfig& config, std::vector<std::string> paths)
    : config_(config), paths_(std::move(paths)) {}

void AdamW::step(ParamStore& store, double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& path : paths_) {
    DiffArray p = store.get(path);
    if (!p.has_grad()) continue;
    auto& m = m_[path];
    auto& v = v_[path];
    if (m.empty()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    // Gains, biases and embedding-free vectors are not decayed.
    const double decay = p.rank() >= 2 ? config_.weight_decay : 0.0;
    auto values = p.mutable_data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      values[i] -= lr * (update + decay * values[i]);
    }
  }
}

double learning_rate(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

std::size_t steps_per_epoch(std::size_t train_size, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  return std::max<std::size_t>(1, train_size / batch_size);
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,lr,loss_total,loss_global,loss_mtc,loss_mlm,loss_vtm\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : rows) {
    out += std::to_string(r.step) + ',' + format_double(r.lr) + ',' + format_double(r.loss_total) + ',' +
           opt(r.loss_global) + ',' + opt(r.loss_mtc) + ',' + opt(r.loss_mlm) + ',' + opt(r.loss_vtm) + '\n';
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& contents) { io::write_file(path, contents); }

void save_checkpoint(const ParamStore& store, const CheckpointInfo& info, const std::string& path) {
  io::Writer w;
  w.bytes(kCkptMagic, sizeof kCkptMagic);
  w.u32(kCkptVersion);
  w.u32(info.stage);
  w.u64(info.step);
  w.u64(store.size());
  for (const auto& [name, value] : store.all()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d : value.shape()) w.u64(d);
    for (double v : value.data()) w.f64(v);
  }
  io::write_file(path, w.str());
}

CheckpointInfo load_checkpoint(ParamStore& store, const std::string& path) {
  std::string bytes;
  try {
    bytes = io::read_file(path);
  } catch (const std::runtime_error&) {
    throw std::runtime_error("checkpoint not found: " + path);
  }
  io::Reader r(std::move(bytes), path);
  if (std::memcmp(r.take(sizeof kCkptMagic), kCkptMagic, sizeof kCkptMagic) != 0)
    throw std::runtime_error(path + ": bad magic, not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointInfo info;
  info.stage = r.u32();
  info.step = r.u64();
  const std::uint64_t count = r.u64();
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::uint32_t len = r.u32();
    const std::string name(r.take(len), len);
    engine::Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    if (!store.contains(name)) throw std::runtime_error(path + ": unknown parameter " + name);
    DiffArray target = store.get(name);
    if (target.shape() != shape)
      throw std::runtime_error(path + ": shape mismatch for " + name + ": stored " + engine::shape_str(shape) +
                               ", model " + engine::shape_str(target.shape()));
    for (double& v : target.mutable_data()) v = r.f64();
  }
  if (!r.done()) throw std::runtime_error(path + ": trailing bytes after the last entry");
  return info;
}

// ---------------------------------------------------------------------------

TrainState init_state(const Config& config) {
  config.validate();
  Config seeded = config;
  seeded.model.init_seed = derive_seed(config.model.init_seed, kInitStream, config.run.seed);
  TrainState state{config, ParamStore{}, {}, {}, 0, 0};
  state.model = encoders::VideoLanguageModel::create(seeded, state.store);
  return state;
}

StepBatch make_step_batch(const TrainState& state, const data::Dims& dims,
                          std::vector<const data::PairedSample*> samples) {
  const DataConfig& c = state.config.data;
  if (dims.clips != c.clips || dims.height != c.height || dims.width != c.width ||
      dims.patch_dim != c.patch_dim || dims.max_tokens != c.max_tokens || dims.vocab != c.vocab)
    throw std::invalid_argument("data dims do not match the model configuration");
  if (dims.frames_per_clip < c.frames_per_clip)
    throw std::invalid_argument("data has " + std::to_string(dims.frames_per_clip) +
                                " frames per clip, the model needs " + std::to_string(c.frames_per_clip));
  StepBatch batch;
  batch.text = data::make_text_batch(samples, dims);
  batch.video = data::make_video_batch(samples, dims);
  if (dims.frames_per_clip != c.frames_per_clip) batch.video = data::subsample_frames(batch.video, c.frames_per_clip);
  batch.samples = std::move(samples);
  return batch;
}

StepLosses stage1_losses(const TrainState& state, const StepBatch& batch, std::uint64_t step_seed) {
  const LossConfig& l = state.config.loss;
  encoders::EncodedText text = state.model.encode_text(batch.text);
  encoders::EncodedVideo video = state.model.encode_video(batch.video);
  DiffArray global = objectives::global_contrastive(video.video_rep, text.paragraph_rep, l.tau);
  std::vector<std::uint64_t> keys;
  for (const auto* s : batch.samples) keys.push_back(s->id);
  const auto plan = objectives::sample_mtc_plan(state.config.data.clips, keys, l, step_seed);
  DiffArray mtc = objectives::mtc_batch_loss(video.clip_reps, text.sentence_reps, plan, l.tau);
  StepLosses out;
  out.total = objectives::stage1_loss(global, mtc, l.lambda1);
  out.global = global.item();
  out.mtc = mtc.item();
  return out;
}

StepLosses stage2_losses(const TrainState& state, const StepBatch& batch, std::uint64_t step_seed) {
  const FrozenInputs in = encode_frozen(state, batch.text, batch.video);
  MlmPass mlm = mlm_pass(state, batch.text, in.video.tokens, derive_seed(step_seed, kMaskStream));
  VtmPass vtm = vtm_pass(state, in, derive_seed(step_seed, kPairStream));
  DiffArray vtm_loss = objectives::vtm_loss(vtm.logits, vtm.labels);
  StepLosses out;
  out.total = objectives::stage2_loss(mlm.loss, vtm_loss, state.config.loss.lambda2);
  out.mlm = mlm.loss.item();
  out.vtm = vtm_loss.item();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

using LossFn = StepLosses (*)(const TrainState&, const StepBatch&, std::uint64_t);

std::vector<MetricsRow> run_stage(TrainState& state, const data::Dataset& dataset, const TrainOptions& options,
                                  std::uint32_t stage, const std::vector<std::string>& groups,
                                  std::size_t default_steps, LossFn loss_fn) {
  const Config& config = state.config;
  config.validate();
  const std::size_t batch_size = config.optim.batch_size;
  if (dataset.train.size() < batch_size)
    throw std::invalid_argument("training split has " + std::to_string(dataset.train.size()) +
                                " samples, fewer than the batch size " + std::to_string(batch_size));
  const std::size_t total = options.steps ? options.steps : default_steps;
  const std::size_t per_epoch = steps_per_epoch(dataset.train.size(), batch_size);
  const std::size_t warmup = config.optim.warmup_steps ? config.optim.warmup_steps : per_epoch;

  AdamW optimizer(config.optim, state.store.paths_in_groups(groups));
  std::vector<std::size_t> order(dataset.train.size());
  std::vector<MetricsRow> rows;

  auto save = [&](std::size_t step) {
    if (!options.checkpoint_path.empty()) save_checkpoint(state.store, {stage, step}, options.checkpoint_path);
  };

  for (std::size_t step = 0; step < total; ++step) {
    if (step % per_epoch == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(config.run.seed, kShuffleStream + stage, step / per_epoch));
      rng.shuffle(order);
    }
    std::vector<const data::PairedSample*> samples;
    const std::size_t offset = (step % per_epoch) * batch_size;
    for (std::size_t i = 0; i < batch_size; ++i) samples.push_back(&dataset.train[order[offset + i]]);
    const StepBatch batch = make_step_batch(state, dataset.dims, std::move(samples));
    const double lr = learning_rate(step, total, warmup, config.optim.lr);

    state.store.zero_grad();
    StepLosses losses;
    {
      engine::Tape tape;
      engine::TapeScope scope(tape);
      losses = loss_fn(state, batch, derive_seed(config.run.seed, kStepStream + stage, step));
      if (!finite(losses.total.item())) {
        save(step);
        throw DivergenceError("stage " + std::to_string(stage) + " loss is not finite at step " +
                              std::to_string(step));
      }
      tape.backward(losses.total);
    }
    for (const auto& path : optimizer.paths()) {
      const DiffArray& p = state.store.get(path);
      if (!p.has_grad()) continue;
      for (double g : p.grad()) {
        if (!finite(g)) {
          save(step);
          throw DivergenceError("stage " + std::to_string(stage) + " gradient of " + path +
                                " is not finite at step " + std::to_string(step));
        }
      }
    }
    optimizer.step(state.store, lr);
    state.store.zero_grad();

    MetricsRow row;
    row.step = step;
    row.lr = lr;
    row.loss_total = losses.total.item();
    if (stage == 1) {
      row.loss_global = losses.global;
      row.loss_mtc = losses.mtc;
    } else {
      row.loss_mlm = losses.mlm;
      row.loss_vtm = losses.vtm;
    }
    rows.push_back(row);
    if (options.on_step) options.on_step(row);
    state.step = step + 1;
  }
  state.stage = stage;
  save(total);
  if (!options.metrics_path.empty()) write_text_file(options.metrics_path, metrics_csv(rows));
  return rows;
}

}  // namespace

TrainResult train_stage1(TrainState& state, const data::Dataset& dataset, const TrainOptions& options) {
  state.frozen_groups.clear();
  TrainResult result;
  result.metrics =
      run_stage(state, dataset, options, 1, kStage1Groups, state.config.optim.stage1_steps, &stage1_losses);
  return result;
}

TrainResult train_stage2(TrainState& state, const data::Dataset& dataset, const TrainOptions& options) {
  if (state.stage < 1) throw std::logic_error("stage 2 needs stage-1 parameters (train or load stage 1 first)");
  state.frozen_groups = kStage1Groups;
  TrainResult result;
  result.frozen_digest_before = state.store.digest(state.frozen_groups);
  result.metrics =
      run_stage(state, dataset, options, 2, kStage2Groups, state.config.optim.stage2_steps, &stage2_losses);
  result.frozen_digest_after = state.store.digest(state.frozen_groups);
  return result;
}

// ---------------------------------------------------------------------------

RetrievalReport retrieval_from_similarity(const std::vector<std::vector<double>>& sim) {
  const std::size_t n = sim.size();
  if (n == 0) throw std::invalid_argument("retrieval: empty split");
  std::vector<double> ranks;
  RetrievalReport report;
  report.count = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (sim[i].size() != n) throw std::invalid_argument("retrieval: similarity matrix must be square");
    std::size_t rank = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && sim[i][j] >= sim[i][i]) ++rank;
    if (rank == 1) report.r1 += 1.0;
    if (rank <= 5) report.r5 += 1.0;
    ranks.push_back(static_cast<double>(rank));
  }
  report.r1 /= static_cast<double>(n);
  report.r5 /= static_cast<double>(n);
  std::sort(ranks.begin(), ranks.end());
  report.median_rank = n % 2 ? ranks[n / 2] : 0.5 * (ranks[n / 2 - 1] + ranks[n / 2]);
  return report;
}

RetrievalReport eval_retrieval(const TrainState& state, const std::vector<data::PairedSample>& split,
                               const data::Dims& dims, std::size_t batch_size) {
  if (split.empty()) throw std::invalid_argument("eval_retrieval: empty split");
  engine::NoGradScope no_grad;
  std::vector<std::vector<double>> text_rows, video_rows;
  for (auto [start, count] : chunks(split.size(), batch_size, 1)) {
    const StepBatch batch = make_step_batch(state, dims, pointers(split, start, count));
    const DiffArray t = state.model.encode_text(batch.text).paragraph_rep;
    const DiffArray v = state.model.encode_video(batch.video).video_rep;
    const std::size_t e = t.dim(1);
    for (std::size_t b = 0; b < count; ++b) {
      text_rows.emplace_back(t.data().begin() + b * e, t.data().begin() + (b + 1) * e);
      video_rows.emplace_back(v.data().begin() + b * e, v.data().begin() + (b + 1) * e);
    }
  }
  std::vector<std::vector<double>> sim(split.size(), std::vector<double>(split.size()));
  for (std::size_t i = 0; i < split.size(); ++i)
    for (std::size_t j = 0; j < split.size(); ++j)
      sim[i][j] = std::inner_product(text_rows[i].begin(), text_rows[i].end(), video_rows[j].begin(), 0.0);
  return retrieval_from_similarity(sim);
}

double eval_vtm_accuracy(const TrainState& state, const std::vector<data::PairedSample>& split,
                         const data::Dims& dims, std::uint64_t seed, std::size_t batch_size) {
  if (split.size() < 2) throw std::invalid_argument("eval_vtm_accuracy: needs at least 2 samples");
  engine::NoGradScope no_grad;
  std::size_t correct = 0, total = 0, index = 0;
  for (auto [start, count] : chunks(split.size(), batch_size, 2)) {
    const StepBatch batch = make_step_batch(state, dims, pointers(split, start, count));
    const FrozenInputs in = encode_frozen(state, batch.text, batch.video);
    const VtmPass vtm = vtm_pass(state, in, derive_seed(seed, kPairStream, index++));
    for (std::size_t b = 0; b < count; ++b) {
      const std::size_t predicted = vtm.logits[2 * b + 1] > vtm.logits[2 * b] ? 1 : 0;
      correct += predicted == vtm.labels[b];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double eval_mlm_loss(const TrainState& state, const std::vector<data::PairedSample>& split, const data::Dims& dims,
                     std::uint64_t seed, std::size_t batch_size) {
  if (split.empty()) throw std::invalid_argument("eval_mlm_loss: empty split");
  engine::NoGradScope no_grad;
  double weighted = 0.0;
  std::size_t predicted = 0, index = 0;
  for (auto [start, count] : chunks(split.size(), batch_size, 1)) {
    const StepBatch batch = make_step_batch(state, dims, pointers(split, start, count));
    const FrozenInputs in = encode_frozen(state, batch.text, batch.video);
    const MlmPass mlm = mlm_pass(state, batch.text, in.video.tokens, derive_seed(seed, kMaskStream, index++));
    weighted += mlm.loss.item() * static_cast<double>(mlm.predicted);
    predicted += mlm.predicted;
  }
  if (predicted == 0) throw std::runtime_error("eval_mlm_loss: no token was selected for prediction");
  return weighted / static_cast<double>(predicted);
}

// ---------------------------------------------------------------------------

Config tiny_config(const Config& base) {
  Config c = base;
  c.model.text = {8, 2, 1, 1, 16};
  for (auto& s : c.model.video.schedule.stages) {
    s.layers = 1;
    s.dim = 8;
    s.heads = 2;
  }
  c.model.video.ffn_ratio = 2;
  c.model.cross = {8, 2, 1, 16, c.model.cross.pool_h, c.model.cross.pool_w};
  c.model.embed_dim = 8;
  c.data.vocab = std::min<std::size_t>(c.data.vocab, 32);
  return c;
}

GradcheckAllReport gradcheck_all(const Config& config, const GradcheckAllOptions& options) {
  Config c = config;
  c.data.train_size = std::max<std::size_t>(options.batch, 2);
  c.data.eval_size = 1;
  c.data.seed = derive_seed(config.data.seed, options.seed);
  c.optim.batch_size = c.data.train_size;
  c.run.seed = options.seed;
  TrainState state = init_state(c);
  const data::Dataset dataset = data::generate(c.data);
  const StepBatch batch = make_step_batch(state, dataset.dims, pointers(dataset.train, 0, dataset.train.size()));
  const std::uint64_t step_seed = derive_seed(options.seed, kStepStream);

  Rng rng(derive_seed(options.seed, kInitStream, 1));
  std::vector<gradcheck::Target> targets;
  GradcheckAllReport out;
  for (const auto& path : state.store.paths_in_groups(kStage1Groups)) {
    const DiffArray& p = state.store.get(path);
    gradcheck::Target t{path, p, {}};
    if (group_of(path) != "head") {
      const auto k = static_cast<std::size_t>(std::ceil(options.fraction * static_cast<double>(p.numel())));
      t.indices = rng.choose(p.numel(), std::min(k, p.numel()));
    }
    out.parameters_checked += t.indices.empty() ? p.numel() : t.indices.size();
    targets.push_back(std::move(t));
  }
  auto loss = [&]() {
    DiffArray l = stage1_losses(state, batch, step_seed).total;
    return options.loss_hook ? options.loss_hook(l) : l;
  };
  out.report = gradcheck::check(loss, std::move(targets), options.tolerances);
  return out;
}

}  // namespace htwa::pipeline
