#include <cmath>
#include <set>

#include "doctest.h"
#include "htwa/encoders.hpp"
#include "test_util.hpp"

using namespace htwa;
using engine::DiffArray;
using testing::bit_equal;
using testing::max_abs_diff;

namespace {

Config small_config() {
  Config c;
  c.data.train_size = 4;
  c.data.eval_size = 2;
  c.optim.batch_size = 2;
  return c;
}

struct Fixture {
  Config config;
  data::Dataset dataset;
  ParamStore store;
  encoders::VideoLanguageModel model;
  data::TextBatch text;
  data::VideoBatch video;

  explicit Fixture(const Config& c, std::size_t batch = 2) : config(c), dataset(data::generate(c.data)) {
    model = encoders::VideoLanguageModel::create(c, store);
    std::vector<const data::PairedSample*> picked;
    for (std::size_t i = 0; i < batch; ++i) picked.push_back(&dataset.train[i]);
    text = data::make_text_batch(picked, dataset.dims);
    video = data::make_video_batch(picked, dataset.dims);
  }
};

data::VideoBatch with_frames_changed(const data::VideoBatch& v, const std::vector<std::size_t>& frames, double value) {
  data::VideoBatch out = v;
  out.patches = v.patches.detach();
  const auto& s = v.patches.shape();
  const std::size_t per_frame = s[2] * s[3] * s[4];
  auto data = out.patches.mutable_data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t f : frames)
      for (std::size_t i = 0; i < per_frame; ++i) data[(b * s[1] + f) * per_frame + i] = value;
  return out;
}

// Per-frame slice of a [B, T, ...] array.
std::vector<double> frame_values(const DiffArray& x, std::size_t b, std::size_t f) {
  const std::size_t per_frame = x.numel() / (x.dim(0) * x.dim(1));
  const auto d = x.data();
  const std::size_t start = (b * x.dim(1) + f) * per_frame;
  return {d.begin() + start, d.begin() + start + per_frame};
}

std::vector<double> rep_row(const DiffArray& x, std::size_t r) {
  const std::size_t d = x.shape().back();
  return {x.data().begin() + r * d, x.data().begin() + (r + 1) * d};
}

void check_unit_rows(const DiffArray& x) {
  const std::size_t d = x.shape().back();
  for (std::size_t r = 0; r < x.numel() / d; ++r) {
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += x[r * d + i] * x[r * d + i];
    CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-9);
  }
}

Config five_stage_config() {
  Config c = small_config();
  c.model.video.schedule = attention::WindowSchedule::with_windows({2, 4, 8, 16, 32}, 16, 2);
  return c;
}

// The full-size geometry (frames, patch grid, 3x5 windows, five stages, 50-token
// sentences, 2x3 pooling, full vocabulary) at reduced width and depth.
Config slim_full_config() {
  Config c = Config::full_size();
  c.model.text = {64, 4, 1, 1, 128};
  const std::size_t dims[] = {16, 32, 64, 64, 128};
  for (std::size_t s = 0; s < 5; ++s) {
    c.model.video.schedule.stages[s].dim = dims[s];
    c.model.video.schedule.stages[s].heads = 2;
    c.model.video.schedule.stages[s].layers = 1;
  }
  c.model.video.ffn_ratio = 2;
  c.model.cross = {64, 4, 1, 128, 2, 3};
  c.model.embed_dim = 32;
  c.data.train_size = 1;
  c.data.eval_size = 1;
  c.optim.batch_size = 2;
  c.data.train_size = 2;
  return c;
}

}  // namespace

TEST_CASE("full-size configuration: sequence lengths and grids") {
  const Config c = Config::full_size();
  CHECK_NOTHROW(c.validate());
  const auto plan = encoders::plan_shapes(c);
  CHECK(plan.text_part2_tokens == 201);
  CHECK(plan.cross_video_tokens_per_frame == 6);
  CHECK(plan.cross_tokens == 1 + 50 * 4 + 32 * 6);
  CHECK(plan.clip_stage == 2);
  CHECK(plan.clip_reps == 4);
  const std::vector<std::pair<std::size_t, std::size_t>> grids{{24, 40}, {12, 20}, {6, 10}, {6, 10}, {3, 5}};
  CHECK(plan.stage_grids == grids);
  CHECK(plan.stage_dims == std::vector<std::size_t>{128, 256, 512, 512, 1024});
  CHECK(c.model.text.dim == 1024);
  CHECK(c.model.text.part1_layers + c.model.text.part2_layers == 12);
  CHECK(c.model.cross.layers == 12);
  CHECK(c.model.video.schedule.temporal_windows() == std::vector<std::size_t>{2, 4, 8, 16, 32});
}

TEST_CASE("toy configuration: shapes and unit-norm representations") {
  Fixture f(small_config());
  const auto plan = encoders::plan_shapes(f.config);
  CHECK(f.config.model.text.part1_layers == 2);
  CHECK(f.config.model.text.part2_layers == 2);
  CHECK(f.config.model.video.schedule.stages.size() == 2);
  const auto text = f.model.encode_text(f.text);
  const auto video = f.model.encode_video(f.video);
  const std::size_t E = f.config.model.embed_dim;
  CHECK(text.sentence_reps.shape() == engine::Shape{2, 4, E});
  CHECK(text.paragraph_rep.shape() == engine::Shape{2, E});
  CHECK(text.tokens.shape() == engine::Shape{2, plan.text_part2_tokens, f.config.model.text.dim});
  CHECK(video.clip_reps.shape() == engine::Shape{2, 4, E});
  CHECK(video.video_rep.shape() == engine::Shape{2, E});
  check_unit_rows(text.sentence_reps);
  check_unit_rows(text.paragraph_rep);
  check_unit_rows(video.clip_reps);
  check_unit_rows(video.video_rep);
  const auto cross = f.model.encode_cross(text, video);
  CHECK(cross.tokens.dim(1) == plan.cross_tokens);
  CHECK(cross.cls.shape() == engine::Shape{2, f.config.model.cross.dim});
  CHECK(f.model.vtm_logits(cross).shape() == engine::Shape{2, 2});
  CHECK(f.model.mlm_logits(cross, {0, 5, 33}).shape() == engine::Shape{3, f.config.data.vocab});
  for (const auto& [path, value] : f.store.all()) {
    const std::string g = group_of(path);
    CHECK_MESSAGE((g == "text" || g == "video" || g == "head" || g == "cross" || g == "mlm" || g == "vtm"), path);
  }
}

TEST_CASE("text: identical sentences give identical sentence reps") {
  Fixture f(small_config(), 1);
  auto batch = f.text;
  const std::size_t L = batch.max_tokens;
  for (std::size_t m = 1; m < batch.sentences; ++m)
    for (std::size_t j = 0; j < L; ++j) {
      batch.ids[m * L + j] = batch.ids[j];
      batch.pad[m * L + j] = batch.pad[j];
    }
  const auto text = f.model.encode_text(batch);
  for (std::size_t m = 1; m < batch.sentences; ++m) CHECK(bit_equal(rep_row(text.sentence_reps, 0), rep_row(text.sentence_reps, m)));
}

TEST_CASE("text: part 1 is block-diagonal per sentence") {
  Fixture f(small_config(), 1);
  const auto base = f.model.encode_text(f.text);
  const std::size_t L = f.text.max_tokens, M = f.text.sentences;
  const Vocabulary vocab{f.config.data.vocab};
  for (std::size_t target = 0; target < M; ++target) {
    for (std::size_t j = 1; j < L; ++j) {
      auto batch = f.text;
      const std::size_t pos = target * L + j;
      batch.ids[pos] = (batch.ids[pos] + 17) % vocab.content;
      batch.pad[pos] = 0;
      const auto changed = f.model.encode_text(batch);
      for (std::size_t m = 0; m < M; ++m) {
        const bool same = bit_equal(rep_row(base.part1_cls, m), rep_row(changed.part1_cls, m));
        CHECK(same == (m != target));
      }
      // Part 2 mixes sentences.
      CHECK(!bit_equal(rep_row(base.paragraph_rep, 0), rep_row(changed.paragraph_rep, 0)));
    }
  }
}

TEST_CASE("text: malformed batches are rejected") {
  Fixture f(small_config(), 1);
  auto batch = f.text;
  batch.ids[0] = 0;
  CHECK_THROWS_AS(f.model.encode_text(batch), std::invalid_argument);
  batch = f.text;
  batch.ids[3] = 10000;
  CHECK_THROWS_AS(f.model.encode_text(batch), std::invalid_argument);
  batch = f.text;
  batch.max_tokens = 4;
  CHECK_THROWS_AS(f.model.encode_text(batch), std::invalid_argument);
}

TEST_CASE("video: constant input gives equal clip reps") {
  for (const Config& c : {small_config(), five_stage_config()}) {
    Fixture f(c, 1);
    std::vector<std::size_t> all(c.data.frames());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto video = f.model.encode_video(with_frames_changed(f.video, all, 0.37));
    for (std::size_t m = 1; m < c.data.clips; ++m)
      CHECK(max_abs_diff(rep_row(video.clip_reps, 0), rep_row(video.clip_reps, m)) <= 1e-12);
  }
}

TEST_CASE("video: clip reps follow the receptive-field oracle") {
  for (const Config& c : {small_config(), five_stage_config()}) {
    Fixture f(c, 1);
    const auto& sched = c.model.video.schedule;
    const std::size_t N = c.data.frames_per_clip, T = c.data.frames();
    const std::size_t clip_stage = f.model.clip_stage();
    CHECK(sched.stages[clip_stage].temporal_window == N);
    const auto base = f.model.encode_video(f.video);
    for (std::size_t perturbed = 0; perturbed < c.data.clips; ++perturbed) {
      std::vector<std::size_t> frames;
      for (std::size_t t = 0; t < N; ++t) frames.push_back(perturbed * N + t);
      const auto changed = f.model.encode_video(with_frames_changed(f.video, frames, 0.0));
      for (std::size_t m = 0; m < c.data.clips; ++m) {
        bool reachable = false;
        for (std::size_t t = 0; t < N; ++t)
          for (std::size_t g : attention::receptive_field(sched, T, m * N + t, clip_stage + 1))
            reachable |= g / N == perturbed;
        const bool same = bit_equal(rep_row(base.clip_reps, m), rep_row(changed.clip_reps, m));
        CAPTURE(perturbed);
        CAPTURE(m);
        CHECK(same == !reachable);
      }
    }
  }
}

TEST_CASE("video: every stage output follows the receptive-field oracle") {
  const Config c = five_stage_config();
  Fixture f(c, 1);
  const auto& sched = c.model.video.schedule;
  const std::size_t T = c.data.frames();
  const auto base = f.model.encode_video(f.video);
  for (std::size_t input = 0; input < T; input += 5) {
    const auto changed = f.model.encode_video(with_frames_changed(f.video, {input}, 3.0));
    for (std::size_t s = 0; s < sched.stages.size(); ++s) {
      for (std::size_t out = 0; out < T; ++out) {
        const auto rf = attention::receptive_field(sched, T, out, s + 1);
        const bool reachable = std::find(rf.begin(), rf.end(), input) != rf.end();
        const bool same = bit_equal(frame_values(base.stage_outputs[s], 0, out), frame_values(changed.stage_outputs[s], 0, out));
        CAPTURE(input);
        CAPTURE(s);
        CAPTURE(out);
        CHECK(same == !reachable);
      }
    }
  }
}

TEST_CASE("video: mismatched batches are rejected") {
  Fixture f(small_config(), 1);
  const auto sub = data::subsample_frames(f.video, 2);
  CHECK_THROWS_AS(f.model.encode_video(sub), std::invalid_argument);
}

TEST_CASE("cross: hiding all video keys reproduces the text-only encoding") {
  Fixture f(small_config());
  const auto text = f.model.encode_text(f.text);
  const auto video = f.model.encode_video(f.video);
  const auto masked = f.model.encode_cross(text.tokens, text.pad, video.tokens, true);
  const auto text_only = f.model.encode_cross(text.tokens, text.pad, {});
  CHECK(text_only.video_tokens == 0);
  CHECK(max_abs_diff(masked.cls.data(), text_only.cls.data()) <= 1e-12);
  const DiffArray text_part = engine::slice(masked.tokens, 1, 0, masked.text_tokens);
  CHECK(max_abs_diff(text_part.data(), text_only.tokens.data()) <= 1e-12);
  const auto open = f.model.encode_cross(text, video);
  CHECK(max_abs_diff(open.cls.data(), text_only.cls.data()) > 1e-6);
}

TEST_CASE("cross: output depends on both modalities") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Config c = small_config();
    c.data.seed = 100 + seed;
    c.model.init_seed = seed;
    Fixture f(c);
    const auto text = f.model.encode_text(f.text);
    const auto video = f.model.encode_video(f.video);
    const auto base = f.model.encode_cross(text, video);

    Rng rng(seed);
    auto noisy = f.video;
    noisy.patches = testing::random_array(f.video.patches.shape(), rng, 1.0, false);
    const auto other_video = f.model.encode_cross(text, f.model.encode_video(noisy));
    auto batch = f.text;
    batch.ids[1] = (batch.ids[1] + 1) % c.data.vocab;
    batch.pad[1] = 0;
    const auto other_text = f.model.encode_cross(f.model.encode_text(batch), video);
    CAPTURE(seed);
    CHECK(max_abs_diff(base.cls.data(), other_video.cls.data()) > 1e-8);
    CHECK(max_abs_diff(base.cls.data(), other_text.cls.data()) > 1e-8);
  }
}

TEST_CASE("full-size geometry forward smoke test (reduced width and depth)") {
  const Config c = slim_full_config();
  const auto plan = encoders::plan_shapes(c);
  Fixture f(c, 1);
  engine::NoGradScope no_grad;
  const auto text = f.model.encode_text(f.text);
  const auto video = f.model.encode_video(f.video);
  CHECK(text.tokens.dim(1) == 201);
  CHECK(video.stage_outputs[0].shape() == engine::Shape{1, 32, 24, 40, 16});
  CHECK(video.tokens.shape() == engine::Shape{1, 32, 3, 5, 128});
  CHECK(video.clip_reps.shape() == engine::Shape{1, 4, 32});
  const auto cross = f.model.encode_cross(text, video);
  CHECK(cross.tokens.dim(1) == plan.cross_tokens);
  CHECK(cross.tokens.dim(1) == 393);
  check_unit_rows(video.clip_reps);
  check_unit_rows(text.paragraph_rep);
  for (double v : cross.cls.data()) CHECK(std::isfinite(v));
}
