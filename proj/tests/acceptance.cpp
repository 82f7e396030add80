// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails. Pass criterion numbers as arguments
// to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "htwa/binary_io.hpp"
#include "htwa/costmodel.hpp"
#include "htwa/pipeline.hpp"
#include "oracles.hpp"

using namespace htwa;
using engine::DiffArray;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kSeeds = 5;
constexpr std::size_t kStage1Steps = 800;

// Notes are printed as they arrive so long criteria show progress.
struct Outcome {
  bool pass = true;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      note("failed: " + what);
    }
  }
  void note(const std::string& line) {
    std::printf("    %s\n", line.c_str());
    std::fflush(stdout);
  }
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "htwa_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Binomial 99% interval for a count out of n, normal approximation.
bool in_binomial_99(std::size_t count, std::size_t n, double p) {
  const double mean = p * double(n);
  const double half = 2.5758 * std::sqrt(double(n) * p * (1.0 - p));
  return std::abs(double(count) - mean) <= half;
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

void gradient_integrity(Outcome& o) {
  gradcheck::Options tol;
  tol.rtol = 1e-3;
  std::size_t checks = 0, failures = 0, elements = 0;
  auto record = [&](const std::string& what, const gradcheck::Report& r) {
    ++checks;
    elements += r.checked;
    if (!r.ok()) {
      ++failures;
      o.note(what + "\n" + gradcheck::describe(r, 5));
    }
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& c : testing::primitive_cases())
      record(std::string("primitive ") + c.name + " seed " + std::to_string(seed), testing::check_primitive(c, seed, tol));
    for (const auto& [name, report] : testing::loss_gradchecks(seed, tol))
      record("loss " + name + " seed " + std::to_string(seed), report);
    pipeline::GradcheckAllOptions options;
    options.seed = seed;
    options.tolerances = tol;
    record("stage-1 model seed " + std::to_string(seed),
           pipeline::gradcheck_all(pipeline::tiny_config(Config{}), options).report);
  }
  o.note(std::to_string(checks) + " checks over 10 seeds, " + std::to_string(elements) + " elements, " +
         std::to_string(failures) + " failures");
  o.require(failures == 0, "every gradient check passes");
}

// ---------------------------------------------------------------------------
// 2. Window locality

std::size_t temporal_window_of(std::size_t token, std::size_t tokens_per_frame, std::size_t window) {
  return token / tokens_per_frame / window;
}

void window_locality_for(const Config& c, const std::string& label, Outcome& o) {
  ParamStore store;
  const auto model = encoders::VideoLanguageModel::create(c, store);
  const auto plan = encoders::plan_shapes(c);
  const std::size_t T = c.data.frames();
  Rng rng(derive_seed(c.run.seed, 0xacc2));
  double worst_oracle = 0.0;
  std::size_t zero_checked = 0, nonzero_within = 0, perturbations = 0;
  bool exact = true, frames_exact = true;
  for (std::size_t s = 0; s < model.video_stages().size(); ++s) {
    const auto& stage = model.video_stages()[s];
    const auto [h, w] = plan.stage_grids[s];
    const std::size_t C = stage.spec.dim, wt = stage.spec.temporal_window;
    const attention::WindowSpec spec{wt, stage.spec.spatial_h, stage.spec.spatial_w, 0};
    for (std::size_t l = 0; l < stage.blocks.size(); ++l) {
      const auto& att = stage.blocks[l].attention;
      attention::TokenGrid grid{testing::random_array({1, T, h, w, C}, rng, 1.0, true)};

      const auto windowed = attention::windowed_mha(grid, spec, att);
      worst_oracle = std::max(worst_oracle,
                              testing::max_abs_diff(windowed.a.data(), testing::masked_full_attention(grid, spec, att).data()));
      // Same geometry with a relative bias well away from its small initial values.
      ParamStore scratch;
      auto biased = attention::WindowAttention::create(scratch, "w", C, att.mha.heads, att.wt, att.wh, att.ww, rng);
      for (double& b : biased.bias_table.mutable_data()) b = rng.normal(0.0, 0.5);
      worst_oracle = std::max(worst_oracle, testing::max_abs_diff(attention::windowed_mha(grid, spec, biased).a.data(),
                                                                  testing::masked_full_attention(grid, spec, biased).data()));

      // Jacobian rows, one output token at a time.
      const std::size_t per_frame = h * w, tokens = T * per_frame;
      for (std::size_t out_tok = 0; out_tok < tokens; out_tok += std::max<std::size_t>(1, tokens / 64)) {
        grid.values.zero_grad();
        engine::Tape tape;
        engine::TapeScope scope(tape);
        const auto out = attention::windowed_mha(grid, spec, att).a;
        const auto row = engine::slice(engine::reshape(out, {tokens, C}), 0, out_tok, 1);
        tape.backward(engine::sum_all(engine::mul(row, testing::random_array({1, C}, rng, 1.0, false))));
        const auto g = grid.values.grad();
        for (std::size_t in_tok = 0; in_tok < tokens; ++in_tok) {
          bool any = false;
          for (std::size_t k = 0; k < C; ++k) any |= g[in_tok * C + k] != 0.0;
          if (temporal_window_of(in_tok, per_frame, wt) == temporal_window_of(out_tok, per_frame, wt)) {
            nonzero_within += any;
          } else {
            exact &= !any;
            ++zero_checked;
          }
        }
      }

      // Perturbing one frame leaves every other temporal window bit-identical.
      const auto base = attention::windowed_mha({grid.values.detach()}, spec, att).a;
      for (std::size_t f = 0; f < T; f += std::max<std::size_t>(1, wt / 2)) {
        DiffArray moved = grid.values.detach();
        auto data = moved.mutable_data();
        for (std::size_t i = 0; i < per_frame * C; ++i) data[f * per_frame * C + i] += 0.75;
        const auto changed = attention::windowed_mha({moved}, spec, att).a;
        for (std::size_t t = 0; t < T; ++t) {
          const auto a = base.data().subspan(t * per_frame * C, per_frame * C);
          const auto b = changed.data().subspan(t * per_frame * C, per_frame * C);
          const bool same = testing::bit_equal(a, b);
          frames_exact &= (t / wt == f / wt) ? !same : same;
        }
        ++perturbations;
      }
    }
  }
  o.note(label + ": " + std::to_string(model.video_stages().size()) + " stages, " + std::to_string(zero_checked) +
         " cross-window Jacobian blocks, " + std::to_string(nonzero_within) + " nonzero within-window blocks, " +
         std::to_string(perturbations) + " frame perturbations, " +
         fmt("max |windowed - masked full| %.3g", worst_oracle));
  o.require(exact, label + ": every cross-window Jacobian entry is exactly zero");
  o.require(nonzero_within > 0, label + ": within-window influence is present");
  o.require(frames_exact, label + ": a perturbation changes exactly its own temporal window");
  o.require(worst_oracle <= 1e-9, label + ": windowed attention equals masked full attention within 1e-9");
}

Config five_stage_config() {
  Config c;
  c.data.train_size = 4;
  c.data.eval_size = 2;
  c.optim.batch_size = 2;
  c.model.video.schedule = attention::WindowSchedule::with_windows({2, 4, 8, 16, 32}, 16, 2);
  return c;
}

void window_locality(Outcome& o) {
  window_locality_for(Config{}, "default schedule", o);
  window_locality_for(five_stage_config(), "schedule [2,4,8,16,32]", o);
}

// ---------------------------------------------------------------------------
// 3. Receptive-field law

data::VideoBatch with_frame_changed(const data::VideoBatch& v, std::size_t frame, double delta) {
  data::VideoBatch out = v;
  out.patches = v.patches.detach();
  const auto& s = v.patches.shape();
  const std::size_t per_frame = s[2] * s[3] * s[4];
  auto data = out.patches.mutable_data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t i = 0; i < per_frame; ++i) data[(b * s[1] + frame) * per_frame + i] += delta;
  return out;
}

std::span<const double> frame_slice(const DiffArray& x, std::size_t f) {
  const std::size_t per_frame = x.numel() / x.dim(1);  // batch 1
  return x.data().subspan(f * per_frame, per_frame);
}

void receptive_field_law(Outcome& o) {
  const Config c = five_stage_config();
  const auto& sched = c.model.video.schedule;
  const data::Dataset dataset = data::generate(c.data);
  ParamStore store;
  const auto model = encoders::VideoLanguageModel::create(c, store);
  const auto video = data::make_video_batch({&dataset.train[0]}, dataset.dims);
  const std::size_t T = c.data.frames(), N = c.data.frames_per_clip, M = c.data.clips;
  const std::size_t clip_stage = model.clip_stage();
  o.require(T == 32 && sched.stages[clip_stage].temporal_window == 8, "clip reps come from the w=8 stage of 32 frames");

  const auto base = model.encode_video(video);
  std::size_t final_pairs = 0, final_changed = 0, clip_checks = 0, clip_agree = 0, stage_checks = 0, stage_agree = 0;
  for (std::size_t input = 0; input < T; ++input) {
    const auto moved = model.encode_video(with_frame_changed(video, input, 1.5));
    for (std::size_t out = 0; out < T; ++out) {
      ++final_pairs;
      final_changed += !testing::bit_equal(frame_slice(base.tokens, out), frame_slice(moved.tokens, out));
    }
    for (std::size_t m = 0; m < M; ++m) {
      bool reachable = false;
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t g : attention::receptive_field(sched, T, m * N + t, clip_stage + 1)) reachable |= g == input;
      const bool same = testing::bit_equal(testing::row(base.clip_reps, m), testing::row(moved.clip_reps, m));
      ++clip_checks;
      clip_agree += same == !reachable;
    }
    for (std::size_t s = 0; s < sched.stages.size(); ++s) {
      for (std::size_t out = 0; out < T; ++out) {
        const auto rf = attention::receptive_field(sched, T, out, s + 1);
        const bool reachable = std::find(rf.begin(), rf.end(), input) != rf.end();
        const bool same =
            testing::bit_equal(frame_slice(base.stage_outputs[s], out), frame_slice(moved.stage_outputs[s], out));
        ++stage_checks;
        stage_agree += same == !reachable;
      }
    }
  }
  o.note(std::to_string(final_changed) + "/" + std::to_string(final_pairs) +
         " (input, output) frame pairs influence the final tokens; clip reps agree with the oracle in " +
         std::to_string(clip_agree) + "/" + std::to_string(clip_checks) + "; stage outputs in " +
         std::to_string(stage_agree) + "/" + std::to_string(stage_checks));
  o.require(final_changed == final_pairs, "final-stage tokens depend on all 32 input frames");
  o.require(clip_agree == clip_checks, "clip reps at the w=8 stage match the receptive-field oracle");
  o.require(stage_agree == stage_checks, "every stage output matches the receptive-field oracle");
}

// ---------------------------------------------------------------------------
// 4. MTC semantics

void mtc_semantics(Outcome& o) {
  std::size_t enumerations = 0, matches = 0, order_stable = 0;
  Rng rng(404);
  for (std::size_t M = 1; M <= 6; ++M) {
    for (std::size_t mask = 1; mask < (1u << M); ++mask) {
      std::vector<std::size_t> cands;
      for (std::size_t q = 0; q < M; ++q)
        if (mask & (1u << q)) cands.push_back(q);
      for (std::size_t p = 0; p < M; ++p) {
        ++enumerations;
        const std::size_t want = testing::brute_positive(p, cands);
        matches += objectives::select_positive(p, cands) == want;
        // Tie-break must not depend on candidate order or on repetition.
        bool stable = true;
        auto order = cands;
        for (int k = 0; k < 4; ++k) {
          std::reverse(order.begin(), order.end());
          if (k % 2) std::rotate(order.begin(), order.begin() + rng.below(order.size()), order.end());
          stable &= objectives::select_positive(p, order) == want;
        }
        order_stable += stable;
      }
    }
  }
  o.note(std::to_string(matches) + "/" + std::to_string(enumerations) + " enumerations match brute force, " +
         std::to_string(order_stable) + " order-independent");
  o.require(matches == enumerations, "positive selection matches exhaustive search for every M <= 6");
  o.require(order_stable == enumerations, "tie-break is deterministic and order-independent");
  o.require(objectives::select_positive(2, {1, 3}) == 1 && objectives::select_positive(2, {3, 1}) == 1,
            "equidistant candidates resolve to the lower index");

  double worst = 0.0;
  Rng gen(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t M = 2 + gen.below(5), d = 4 + gen.below(8), n = gen.below(4);
    const double tau = trial % 2 ? 0.05 : gen.uniform(0.05, 1.0);
    objectives::MtcPlan plan;
    plan.anchors = gen.choose(M, 1 + gen.below(M));
    plan.candidates = gen.choose(M, 1 + gen.below(M));
    const auto v = testing::unit_rows({M, d}, gen), t = testing::unit_rows({M, d}, gen);
    DiffArray negs = n ? testing::unit_rows({n, d}, gen) : DiffArray();
    std::vector<std::vector<double>> neg_rows;
    for (std::size_t i = 0; i < n; ++i) neg_rows.push_back(testing::row(negs, i));
    const double got = objectives::mtc_pair_loss(v, t, negs, plan, tau).item();
    worst = std::max(worst, std::abs(got - testing::brute_mtc(v, t, neg_rows, plan, tau)));
  }
  o.note(fmt("100 instances, max |loss - scalar recomputation| %.3g", worst));
  o.require(worst <= 1e-10, "temporal loss matches the scalar recomputation within 1e-10");
}

// ---------------------------------------------------------------------------
// 5. Learning signal

struct Variant {
  const char* name;
  double lambda1;
  bool eight_frames;
};

Config variant_config(const Variant& v, std::uint64_t seed) {
  Config c;
  c.run.seed = seed;
  c.loss.lambda1 = v.lambda1;
  if (v.eight_frames) {
    // Same 4 clips, 2 frames each; the window schedule keeps its shape.
    c.data.frames_per_clip = 2;
    c.model.video.schedule.stages[0].temporal_window = 2;
    c.model.video.schedule.stages[1].temporal_window = 8;
  }
  return c;
}

fs::path stage1_checkpoint() { return work_dir() / "stage1_seed0.ckpt"; }

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

void learning_signal(Outcome& o) {
  const Config base;
  const data::Dataset dataset = data::generate(base.data);
  const double chance = 1.0 / double(dataset.eval.size());
  const std::vector<Variant> variants{{"global+MTC, 32 frames", 1.0, false},
                                      {"global only, 32 frames", 0.0, false},
                                      {"global only, 8 frames", 0.0, true}};
  std::vector<std::vector<double>> r1(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      const auto start = std::chrono::steady_clock::now();
      auto state = pipeline::init_state(variant_config(variants[v], seed));
      pipeline::TrainOptions options;
      options.steps = kStage1Steps;
      if (v == 0 && seed == 0) options.checkpoint_path = stage1_checkpoint().string();
      pipeline::train_stage1(state, dataset, options);
      const auto report = pipeline::eval_retrieval(state, dataset.eval, dataset.dims);
      r1[v].push_back(report.r1);
      o.note(std::string(variants[v].name) + " seed " + std::to_string(seed) +
             fmt(": R@1 %.3f R@5 %.3f median rank %.1f (%.0f s)", report.r1, report.r5, report.median_rank,
                 seconds_since(start)));
    }
  }
  const double mtc = mean(r1[0]), global = mean(r1[1]), eight = mean(r1[2]);
  o.note(fmt("mean R@1: global+MTC %.3f, global only %.3f, 8 frames %.3f, chance %.3f", mtc, global, eight, chance));
  o.note(fmt("gaps: (a) min mean R@1 / chance %.1fx, (b) MTC - global %+.3f, (c) 32f - 8f %+.3f",
             std::min({mtc, global, eight}) / chance, mtc - global, global - eight));
  o.require(mtc >= 10.0 * chance && global >= 10.0 * chance && eight >= 10.0 * chance,
            "(a) every variant beats chance R@1 by at least 10x");
  o.require(mtc - global >= 0.0, "(b) mean R@1(global+MTC) - mean R@1(global only) >= 0");
  o.require(global - eight >= 0.0, "(c) mean R@1(32 frames) >= mean R@1(8 frames)");
}

// ---------------------------------------------------------------------------
// 6. Cost model

costmodel::CostOptions cost_options(const Config& c) {
  costmodel::CostOptions o;
  o.ffn_ratio = c.model.video.ffn_ratio;
  o.patch_dim = c.data.patch_dim;
  o.embed_dim = c.model.embed_dim;
  o.clips = c.data.clips;
  o.clip_stage = encoders::plan_shapes(c).clip_stage;
  return o;
}

bool counter_matches(const Config& c, std::size_t batch, std::string& detail) {
  ParamStore store;
  const auto model = encoders::VideoLanguageModel::create(c, store);
  Rng rng(9);
  data::VideoBatch video{testing::random_array({batch, c.data.frames(), c.data.height, c.data.width, c.data.patch_dim},
                                               rng, 1.0, false),
                         c.data.clips, c.data.frames_per_clip};
  auto& counter = engine::MacCounter::instance();
  counter.reset();
  counter.set_enabled(true);
  model.encode_video(video);
  counter.set_enabled(false);
  const auto report =
      costmodel::schedule_cost(c.model.video.schedule, c.data.frames(), c.data.height, c.data.width, cost_options(c));
  const std::map<std::string, std::uint64_t> expected{{"projection", report.projection()},
                                                      {"attention_scores", report.attention_scores()},
                                                      {"attention_values", report.attention_values()},
                                                      {"feed_forward", report.feed_forward()},
                                                      {"merge", report.merge()},
                                                      {"patch_embed", report.patch_embed},
                                                      {"head", report.heads}};
  bool ok = counter.total() == batch * report.total();
  for (const auto& [category, count] : counter.by_category()) {
    const auto it = expected.find(category);
    ok &= it != expected.end() && count == batch * it->second;
  }
  for (const auto& [category, count] : expected) ok &= counter.by_category().count(category) || count == 0;
  detail = std::to_string(counter.total()) + " counted vs " + std::to_string(batch * report.total()) + " analytic";
  counter.reset();
  return ok;
}

void cost_model(Outcome& o) {
  Config five;
  five.data.height = 4;
  five.data.width = 4;
  five.model.video.schedule.stages = {{1, 8, 2, 2, 0, 0, 1},   {1, 16, 2, 4, 0, 0, 2}, {2, 16, 4, 8, 0, 0, 1},
                                      {1, 32, 4, 16, 0, 0, 2}, {1, 32, 2, 32, 0, 0, 1}};
  five.model.video.ffn_ratio = 3;
  Config spatial;
  spatial.data.height = 4;
  spatial.data.width = 6;
  spatial.model.video.schedule.stages = {{1, 8, 2, 8, 2, 3, 1}, {2, 16, 2, 32, 1, 3, 2}};
  spatial.model.video.clip_pool_times = 0;
  for (const auto& [label, c, batch] : {std::tuple{"default", Config{}, 1}, std::tuple{"default", Config{}, 3},
                                        std::tuple{"five-stage", five, 2}, std::tuple{"spatial windows", spatial, 1}}) {
    std::string detail;
    const bool ok = counter_matches(c, batch, detail);
    o.note(std::string(label) + " batch " + std::to_string(batch) + ": " + detail);
    o.require(ok, std::string(label) + ": analytic counts equal the instrumented counter in every category");
  }

  const Config c;
  const std::size_t T = c.data.frames(), S = c.data.height * c.data.width;
  const auto w2 = costmodel::attention_flops(T, S, 32, 2, 2), w32 = costmodel::attention_flops(T, S, 32, 2, 32);
  const auto ss = [](const costmodel::AttentionCost& a) { return a.attention_scores + a.attention_values; };
  o.note("score+sum MACs: fixed-2 " + std::to_string(ss(w2)) + ", fixed-32 " + std::to_string(ss(w32)));
  o.require(ss(w32) == 16 * ss(w2), "fixed-32 score+sum cost is 16x fixed-2 at equal dims");
  const auto& sched = c.model.video.schedule;
  const auto fixed2 = costmodel::schedule_cost(costmodel::fixed_window(sched, 2), T, c.data.height, c.data.width,
                                               cost_options(c));
  const auto fixed32 = costmodel::schedule_cost(costmodel::fixed_window(sched, 32), T, c.data.height, c.data.width,
                                                cost_options(c));
  o.require(fixed32.attention_scores() + fixed32.attention_values() ==
                16 * (fixed2.attention_scores() + fixed2.attention_values()),
            "whole-schedule fixed-32 score+sum cost is 16x fixed-2");

  const auto htwa = costmodel::schedule_cost(sched, T, c.data.height, c.data.width, cost_options(c));
  o.note("default schedule total " + std::to_string(htwa.total()) + " vs fixed-32 " + std::to_string(fixed32.total()) +
         fmt(" (%.3fx)", double(fixed32.total()) / double(htwa.total())));
  o.require(htwa.total() < fixed32.total(), "hierarchical schedule costs less than fixed-32 in total");
}

// ---------------------------------------------------------------------------
// 7. Pipeline contracts

void pipeline_contracts(Outcome& o) {
  const Config c;
  const data::Dataset dataset = data::generate(c.data);
  const Vocabulary vocab{c.data.vocab};

  // Masking proportions on the whole training split.
  std::vector<const data::PairedSample*> all;
  for (const auto& s : dataset.train) all.push_back(&s);
  const auto text = data::make_text_batch(all, dataset.dims);
  std::size_t eligible = 0;
  for (std::uint32_t id : text.ids) eligible += !vocab.is_special(id);
  Rng mask_rng(derive_seed(c.run.seed, 0xacc71));
  const auto masked = data::mask_tokens(text, vocab, c.loss.mask_rate, mask_rng);
  std::size_t to_mask = 0, to_random = 0, unchanged = 0;
  for (std::size_t i = 0; i < masked.positions.size(); ++i) {
    const std::uint32_t now = masked.text.ids[masked.positions[i]];
    if (now == vocab.mask()) {
      ++to_mask;
    } else if (now == masked.labels[i]) {
      ++unchanged;
    } else {
      ++to_random;
    }
  }
  const std::size_t n = masked.positions.size();
  const double content = double(vocab.content);
  o.note("masking: " + std::to_string(n) + " of " + std::to_string(eligible) + " selected, " + std::to_string(to_mask) +
         " [MASK], " + std::to_string(to_random) + " random, " + std::to_string(unchanged) + " unchanged");
  o.require(in_binomial_99(n, eligible, c.loss.mask_rate), "selection rate in its 99% interval");
  o.require(in_binomial_99(to_mask, n, 0.8), "[MASK] share in its 99% interval");
  o.require(in_binomial_99(to_random, n, 0.1 * (content - 1.0) / content), "random-token share in its 99% interval");
  o.require(in_binomial_99(unchanged, n, 0.1 + 0.1 / content), "unchanged share in its 99% interval");

  Rng pair_rng(derive_seed(c.run.seed, 0xacc72));
  const std::size_t pairs = 10000;
  const auto pairing = data::vtm_pairs(pairs, c.loss.vtm_replace_prob, pair_rng);
  std::size_t replaced = 0;
  bool consistent = true;
  for (std::size_t i = 0; i < pairs; ++i) {
    replaced += pairing.labels[i] == 0;
    consistent &= (pairing.labels[i] == 0) == (pairing.video_index[i] != i);
  }
  o.note("VTM pairing: " + std::to_string(replaced) + " of " + std::to_string(pairs) + " replaced");
  o.require(in_binomial_99(replaced, pairs, 0.5), "VTM label balance in its 99% interval at probability 0.5");
  o.require(consistent, "VTM labels agree with the paired video");

  // Stage 2 on top of a trained stage-1 model.
  auto state = pipeline::init_state(variant_config({"", 1.0, false}, 0));
  if (fs::exists(stage1_checkpoint())) {
    pipeline::load_checkpoint(state.store, stage1_checkpoint().string());
    state.stage = 1;
    o.note("stage 1: reused the seed-0 global+MTC run");
  } else {
    pipeline::TrainOptions options;
    options.steps = kStage1Steps;
    options.checkpoint_path = stage1_checkpoint().string();
    pipeline::train_stage1(state, dataset, options);
    o.note("stage 1: trained " + std::to_string(kStage1Steps) + " steps");
  }
  const std::uint64_t eval_seed = derive_seed(c.run.seed, 0xe7a1);
  const double mlm_before = pipeline::eval_mlm_loss(state, dataset.eval, dataset.dims, eval_seed);
  const double vtm_before = pipeline::eval_vtm_accuracy(state, dataset.eval, dataset.dims, eval_seed);
  const auto frozen = state.store.digest(pipeline::kStage1Groups);
  const auto result = pipeline::train_stage2(state, dataset);  // the configured stage-2 budget
  const double mlm = pipeline::eval_mlm_loss(state, dataset.eval, dataset.dims, eval_seed);
  const double vtm = pipeline::eval_vtm_accuracy(state, dataset.eval, dataset.dims, eval_seed);
  o.note(fmt("stage 2 over %.0f steps: eval MLM %.3f -> %.3f (ln vocab %.3f)", double(result.metrics.size()), mlm_before, mlm,
             std::log(content)) +
         fmt(", eval VTM accuracy %.3f -> %.3f", vtm_before, vtm));
  o.require(result.frozen_digest_before == frozen && result.frozen_digest_after == frozen &&
                state.store.digest(pipeline::kStage1Groups) == frozen,
            "stage-2 frozen-parameter digests unchanged");
  o.require(mlm < std::log(content), "stage-2 eval MLM loss below ln(vocab)");
  o.require(vtm > 0.5, "stage-2 eval VTM accuracy above 0.5");
}

// ---------------------------------------------------------------------------
// 8. Determinism

std::map<std::string, std::string> run_all_subcommands(const fs::path& dir, std::string& error) {
  const std::vector<std::string> common{
      "--seed",         "7",
      "--set",          "run.out_dir=" + dir.string(),
      "--set",          "data.train_size=32",
      "--set",          "data.eval_size=12",
      "--set",          "optim.batch_size=8",
      "--set",          "optim.stage1_steps=6",
      "--set",          "optim.stage2_steps=6"};
  std::map<std::string, std::string> files;
  for (const char* cmd : {"gen-data", "train-stage1", "train-stage2", "eval-retrieval", "gradcheck", "analyze-cost"}) {
    std::vector<std::string> args{cmd};
    args.insert(args.end(), common.begin(), common.end());
    std::ostringstream out, err;
    if (const int code = cli::run(args, out, err); code != 0) {
      error = std::string(cmd) + " exited " + std::to_string(code) + ": " + err.str();
      return files;
    }
  }
  for (const auto& entry : fs::directory_iterator(dir))
    files[entry.path().filename().string()] = io::read_file(entry.path().string());
  return files;
}

void determinism(Outcome& o) {
  std::vector<std::map<std::string, std::string>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    std::string error;
    const fs::path dir = work_dir() / ("determinism" + std::to_string(rep));
    runs.push_back(run_all_subcommands(dir, error));
    o.require(error.empty(), error);
    if (!error.empty()) return;
  }
  std::size_t identical = 0;
  for (const auto& [name, bytes] : runs[0]) {
    const auto it = runs[1].find(name);
    const bool same = it != runs[1].end() && it->second == bytes;
    identical += same;
    o.require(same, name + " is byte-identical across repeats");
  }
  for (const char* name : {"data.shard", "stage1.ckpt", "stage1_metrics.csv", "stage2.ckpt", "stage2_metrics.csv",
                           "retrieval.csv", "gradcheck.txt", "cost.csv"})
    o.require(runs[0].count(name) == 1, std::string(name) + " was written");
  o.require(runs[0].size() == runs[1].size(), "both repeats wrote the same set of files");
  o.note(std::to_string(identical) + "/" + std::to_string(runs[0].size()) +
         " artifacts byte-identical over six subcommands run twice");
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* title;
  double budget_seconds;  // 0: no runtime bound
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", 120.0, gradient_integrity},
      {2, "window locality", 60.0, window_locality},
      {3, "receptive-field law", 0.0, receptive_field_law},
      {4, "temporal contrastive semantics", 0.0, mtc_semantics},
      {5, "learning signal", 1800.0, learning_signal},
      {6, "cost model", 60.0, cost_model},
      {7, "pipeline contracts", 0.0, pipeline_contracts},
      {8, "determinism", 0.0, determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double elapsed = seconds_since(start);
    if (c.budget_seconds > 0.0) o.require(elapsed < c.budget_seconds, fmt("runtime under %.0f s", c.budget_seconds));
    std::printf("%s criterion %d (%s) in %.1f s\n", o.pass ? "PASS" : "FAIL", c.id, c.title, elapsed);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
