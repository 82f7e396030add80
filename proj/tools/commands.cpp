#include "commands.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "config_yaml.hpp"
#include "htwa/costmodel.hpp"
#include "htwa/data.hpp"
#include "htwa/pipeline.hpp"

namespace htwa::cli {

namespace {

namespace fs = std::filesystem;

// A failed precondition the user can fix (missing input file and the like).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string preset = "toy";
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool dump = false;
  bool dry_run = false;
};

struct Context {
  Config config;
  bool dry_run = false;
  std::ostream& out;
  std::ostream& err;

  std::string out_path(const std::string& name) const { return (fs::path(config.run.out_dir) / name).string(); }
};

Config resolve(const Common& common) {
  Config c;
  if (common.preset == "full") {
    c = Config::full_size();
  } else if (common.preset != "toy") {
    throw ConfigError("--preset", "expected toy or full, got '" + common.preset + "'");
  }
  if (!common.config_path.empty()) apply_file(c, common.config_path);
  for (const auto& s : common.sets) apply_assignment(c, s);
  if (const char* env = std::getenv("HTWA_SEED")) {
    try {
      std::size_t used = 0;
      const std::string text = env;
      if (text.empty() || text[0] == '-') throw std::invalid_argument(text);
      c.run.seed = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::exception&) {
      throw ConfigError("HTWA_SEED", std::string("expected a non-negative integer, got '") + env + "'");
    }
  }
  if (common.seed) c.run.seed = *common.seed;
  return c;
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void require_file(const std::string& path, const std::string& what, const std::string& hint) {
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path + " (" + hint + ")");
}

data::Dataset load_dataset(const Context& ctx) {
  const std::string path = ctx.config.data_path();
  require_file(path, "data shard", "run gen-data first");
  return data::read_shard(path);
}

void print_plan(const Context& ctx, const std::string& command, const std::vector<std::string>& inputs,
                const std::vector<std::string>& outputs, const std::string& detail = "") {
  ctx.out << "dry run: " << command << " (config valid, seed " << ctx.config.run.seed << ")\n";
  for (const auto& p : inputs) ctx.out << "  reads  " << p << '\n';
  for (const auto& p : outputs) ctx.out << "  writes " << p << '\n';
  if (!detail.empty()) ctx.out << "  " << detail << '\n';
}

std::string format_report(const pipeline::RetrievalReport& r) {
  std::ostringstream os;
  os << "R@1 " << r.r1 * 100.0 << "%  R@5 " << r.r5 * 100.0 << "%  MedR " << r.median_rank << "  (" << r.count
     << " paragraphs, chance R@1 " << 100.0 / static_cast<double>(r.count) << "%)";
  return os.str();
}

int gen_data(const Context& ctx) {
  const std::string path = ctx.config.data_path();
  if (ctx.dry_run) {
    print_plan(ctx, "gen-data", {}, {path},
               std::to_string(ctx.config.data.train_size) + " train + " + std::to_string(ctx.config.data.eval_size) +
                   " eval samples");
    return kOk;
  }
  const data::Dataset dataset = data::generate(ctx.config.data);
  ensure_parent(path);
  data::write_shard(dataset, path);
  ctx.out << "wrote " << dataset.train.size() << " train and " << dataset.eval.size() << " eval samples to " << path
          << '\n';
  return kOk;
}

int train_stage1(const Context& ctx) {
  const std::string ckpt = ctx.config.stage1_path();
  const std::string metrics = ctx.out_path("stage1_metrics.csv");
  if (ctx.dry_run) {
    print_plan(ctx, "train-stage1", {ctx.config.data_path()}, {ckpt, metrics},
               std::to_string(ctx.config.optim.stage1_steps) + " steps of batch " +
                   std::to_string(ctx.config.optim.batch_size));
    return kOk;
  }
  const data::Dataset dataset = load_dataset(ctx);
  pipeline::TrainState state = pipeline::init_state(ctx.config);
  ensure_parent(ckpt);
  ensure_parent(metrics);
  pipeline::TrainOptions options;
  options.checkpoint_path = ckpt;
  options.metrics_path = metrics;
  const auto result = pipeline::train_stage1(state, dataset, options);
  const auto& last = result.metrics.back();
  ctx.out << "stage 1: " << result.metrics.size() << " steps, final loss " << last.loss_total << " (global "
          << *last.loss_global << ", mtc " << *last.loss_mtc << ")\n";
  ctx.out << "eval retrieval: " << format_report(pipeline::eval_retrieval(state, dataset.eval, dataset.dims)) << '\n';
  ctx.out << "wrote " << ckpt << " and " << metrics << '\n';
  return kOk;
}

int train_stage2(const Context& ctx) {
  const std::string input = ctx.config.stage1_path();
  const std::string ckpt = ctx.config.stage2_path();
  const std::string metrics = ctx.out_path("stage2_metrics.csv");
  require_file(input, "stage-1 checkpoint", "run train-stage1 first");
  if (ctx.dry_run) {
    print_plan(ctx, "train-stage2", {ctx.config.data_path(), input}, {ckpt, metrics},
               std::to_string(ctx.config.optim.stage2_steps) + " steps of batch " +
                   std::to_string(ctx.config.optim.batch_size));
    return kOk;
  }
  const data::Dataset dataset = load_dataset(ctx);
  pipeline::TrainState state = pipeline::init_state(ctx.config);
  const auto info = pipeline::load_checkpoint(state.store, input);
  state.stage = info.stage;
  ensure_parent(ckpt);
  ensure_parent(metrics);
  pipeline::TrainOptions options;
  options.checkpoint_path = ckpt;
  options.metrics_path = metrics;
  const auto result = pipeline::train_stage2(state, dataset, options);
  const auto& last = result.metrics.back();
  ctx.out << "stage 2: " << result.metrics.size() << " steps, final loss " << last.loss_total << " (mlm "
          << *last.loss_mlm << ", vtm " << *last.loss_vtm << ")\n";
  ctx.out << "frozen encoders unchanged: " << (result.frozen_digest_before == result.frozen_digest_after ? "yes" : "NO")
          << '\n';
  const std::uint64_t seed = derive_seed(ctx.config.run.seed, 0xe7a1);
  ctx.out << "eval MLM loss " << pipeline::eval_mlm_loss(state, dataset.eval, dataset.dims, seed) << " (uniform "
          << std::log(static_cast<double>(ctx.config.data.vocab)) << "), VTM accuracy "
          << pipeline::eval_vtm_accuracy(state, dataset.eval, dataset.dims, seed) << '\n';
  ctx.out << "wrote " << ckpt << " and " << metrics << '\n';
  return result.frozen_digest_before == result.frozen_digest_after ? kOk : kFailure;
}

int eval_retrieval(const Context& ctx, std::string checkpoint, const std::string& split) {
  if (checkpoint.empty()) checkpoint = ctx.config.stage1_path();
  if (split != "eval" && split != "train") throw UsageError("--split must be eval or train, got '" + split + "'");
  const std::string report_path = ctx.out_path("retrieval.csv");
  require_file(checkpoint, "checkpoint", "run train-stage1 first");
  if (ctx.dry_run) {
    print_plan(ctx, "eval-retrieval", {ctx.config.data_path(), checkpoint}, {report_path});
    return kOk;
  }
  const data::Dataset dataset = load_dataset(ctx);
  pipeline::TrainState state = pipeline::init_state(ctx.config);
  pipeline::load_checkpoint(state.store, checkpoint);
  const auto r = pipeline::eval_retrieval(state, split == "eval" ? dataset.eval : dataset.train, dataset.dims);
  std::ostringstream csv;
  csv << "r1,r5,median_rank,count\n";
  char line[128];
  std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%zu\n", r.r1, r.r5, r.median_rank, r.count);
  csv << line;
  ensure_parent(report_path);
  pipeline::write_text_file(report_path, csv.str());
  ctx.out << "paragraph-to-video retrieval (" << split << "): " << format_report(r) << '\n';
  return kOk;
}

int gradcheck(const Context& ctx, std::size_t seeds, double fraction, bool shrink) {
  const std::string report_path = ctx.out_path("gradcheck.txt");
  const Config config = shrink ? pipeline::tiny_config(ctx.config) : ctx.config;
  config.validate();
  if (ctx.dry_run) {
    print_plan(ctx, "gradcheck", {}, {report_path},
               std::to_string(seeds) + " seeds, fraction " + std::to_string(fraction) +
                   (shrink ? ", tiny widths" : ", configured widths"));
    return kOk;
  }
  std::ostringstream report;
  bool ok = true;
  for (std::size_t s = 0; s < seeds; ++s) {
    pipeline::GradcheckAllOptions options;
    options.seed = derive_seed(ctx.config.run.seed, s);
    options.fraction = fraction;
    const auto result = pipeline::gradcheck_all(config, options);
    ok = ok && result.report.ok();
    report << "seed " << s << ": " << gradcheck::describe(result.report);
  }
  report << (ok ? "PASS" : "FAIL") << '\n';
  ensure_parent(report_path);
  pipeline::write_text_file(report_path, report.str());
  ctx.out << report.str() << "wrote " << report_path << '\n';
  return ok ? kOk : kFailure;
}

std::vector<std::size_t> parse_windows(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      if (item.empty() || item[0] == '-') throw std::invalid_argument(item);
      out.push_back(std::stoull(item, &used));
      if (used != item.size() || out.back() == 0) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--schedule: expected comma-separated positive windows, got '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError("--schedule: no windows given");
  return out;
}

int analyze_cost(const Context& ctx, const std::string& schedule_text, std::size_t frames, std::string csv_path) {
  const Config& c = ctx.config;
  if (csv_path.empty()) csv_path = ctx.out_path("cost.csv");
  attention::WindowSchedule schedule = c.model.video.schedule;
  if (!schedule_text.empty()) {
    const auto windows = parse_windows(schedule_text);
    if (windows.size() == schedule.stages.size()) {
      for (std::size_t i = 0; i < windows.size(); ++i) schedule.stages[i].temporal_window = windows[i];
    } else {
      const auto& first = schedule.stages.front();
      schedule = attention::WindowSchedule::with_windows(windows, first.dim, first.heads, first.layers);
    }
  }
  if (frames == 0) frames = c.data.frames();
  costmodel::CostOptions options;
  options.ffn_ratio = c.model.video.ffn_ratio;
  options.patch_dim = c.data.patch_dim;
  const auto report = costmodel::schedule_cost(schedule, frames, c.data.height, c.data.width, options);
  const auto fixed =
      costmodel::schedule_cost(costmodel::fixed_window(schedule, frames), frames, c.data.height, c.data.width, options);
  if (ctx.dry_run) {
    print_plan(ctx, "analyze-cost", {}, {csv_path}, std::to_string(schedule.stages.size()) + " stages");
    return kOk;
  }
  ensure_parent(csv_path);
  pipeline::write_text_file(csv_path, costmodel::cost_csv(report));
  ctx.out << costmodel::cost_table(report);
  char ratio[64];
  std::snprintf(ratio, sizeof ratio, "%.3f", static_cast<double>(fixed.total()) / static_cast<double>(report.total()));
  ctx.out << "fixed-" << frames << " total: " << fixed.total() << " (" << ratio << "x this schedule)\n";
  ctx.out << "wrote " << csv_path << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical temporal-window video-language training on synthetic long-form data", "htwa"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Common common;
  app.add_option("--preset", common.preset, "Starting configuration: toy or full")->capture_default_str();
  app.add_option("--config", common.config_path, "Nested key: value config file");
  app.add_option("--set", common.sets, "Override one key, e.g. --set loss.tau=0.07 (repeatable)");
  app.add_option("--seed", common.seed, "Run seed (overrides HTWA_SEED and the config)");
  app.add_flag("--dump-config", common.dump, "Print the resolved configuration and exit");
  app.add_flag("--dry-run", common.dry_run, "Validate and print the plan without touching any file");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset shard");
  auto* s1 = app.add_subcommand("train-stage1", "Train the two-stream model (global + temporal contrastive)");
  auto* s2 = app.add_subcommand("train-stage2", "Train the fusion model (MLM + VTM) on frozen encoders");
  auto* ev = app.add_subcommand("eval-retrieval", "Paragraph-to-video retrieval with a stage-1 checkpoint");
  std::string checkpoint, split = "eval";
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate (default: the stage-1 path)");
  ev->add_option("--split", split, "eval or train")->capture_default_str();
  auto* gc = app.add_subcommand("gradcheck", "End-to-end finite-difference check of the stage-1 loss");
  std::size_t seeds = 1;
  double fraction = 0.01;
  bool full_width = false;
  gc->add_option("--seeds", seeds, "Number of seeds")->capture_default_str();
  gc->add_option("--fraction", fraction, "Fraction of non-head elements checked")->capture_default_str();
  gc->add_flag("--full-width", full_width, "Check the configured widths instead of shrunk ones");
  auto* ac = app.add_subcommand("analyze-cost", "Multiply-add cost of the video encoder schedule");
  std::string schedule_text, csv_path;
  std::size_t frames = 0;
  ac->add_option("--schedule", schedule_text, "Temporal windows per stage, e.g. 2,4,8,16,32");
  ac->add_option("--frames", frames, "Frames per video (default: the configured clips x frames)");
  ac->add_option("--csv", csv_path, "CSV output path (default: <out_dir>/cost.csv)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  }

  try {
    Context ctx{resolve(common), common.dry_run, out, err};
    if (common.dump) {
      out << dump_config(ctx.config);
      return kOk;
    }
    ctx.config.validate();
    if (gen->parsed()) return gen_data(ctx);
    if (s1->parsed()) return train_stage1(ctx);
    if (s2->parsed()) return train_stage2(ctx);
    if (ev->parsed()) return eval_retrieval(ctx, checkpoint, split);
    if (gc->parsed()) return gradcheck(ctx, seeds, fraction, !full_width);
    if (ac->parsed()) return analyze_cost(ctx, schedule_text, frames, csv_path);
    err << "error: no subcommand given\n" << app.help();
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const pipeline::DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kFailure;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace htwa::cli
