#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "commands.hpp"
#include "config_yaml.hpp"
#include "doctest.h"
#include "htwa/binary_io.hpp"

using namespace htwa;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "htwa_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

std::vector<std::string> small(const fs::path& dir) {
  return {"--set", "run.out_dir=" + dir.string(), "--set", "data.train_size=24", "--set", "data.eval_size=10",
          "--set", "optim.batch_size=8",          "--set", "optim.stage1_steps=3", "--set", "optim.stage2_steps=3"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string slurp(const fs::path& p) { return io::read_file(p.string()); }

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~ScopedEnv() { ::unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST_CASE("dumped configuration lists every key and reloads to the same document") {
  for (const Config& c : {Config{}, Config::full_size()}) {
    const std::string dump = cli::dump_config(c);
    for (const auto& key : cli::config_keys()) {
      const std::string leaf = key.substr(key.rfind('.') + 1);
      CHECK(dump.find(leaf + ":") != std::string::npos);
    }
    Config reloaded;
    reloaded.model.video.schedule.stages.clear();
    cli::apply_document(reloaded, dump);
    CHECK(cli::dump_config(reloaded) == dump);
  }
  const auto r = run({"--dump-config"});
  CHECK(r.code == 0);
  CHECK(r.out == cli::dump_config(Config{}));
}

TEST_CASE("config documents reject unknown keys and ill-typed values with the key path") {
  Config c;
  CHECK_THROWS_WITH_AS(cli::apply_document(c, "optim:\n  batchsize: 4\n"), doctest::Contains("optim.batchsize"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(cli::apply_document(c, "extra: 1\n"), doctest::Contains("extra"), ConfigError);
  CHECK_THROWS_WITH_AS(cli::apply_document(c, "loss:\n  tau: warm\n"), doctest::Contains("loss.tau"), ConfigError);
  CHECK_THROWS_WITH_AS(cli::apply_document(c, "data:\n  clips: -4\n"), doctest::Contains("data.clips"), ConfigError);
  CHECK_THROWS_WITH_AS(
      cli::apply_document(c, "model:\n  video:\n    schedule:\n      - {dim: 8, window: 2}\n"),
      doctest::Contains("model.video.schedule[0].window"), ConfigError);
  CHECK_THROWS_WITH_AS(cli::apply_assignment(c, "loss.nope=1"), doctest::Contains("loss.nope"), ConfigError);
  CHECK_THROWS_AS(cli::apply_assignment(c, "loss.tau"), ConfigError);

  cli::apply_document(c, "loss:\n  tau: 0.07\nrun:\n  out_dir: elsewhere\n");
  CHECK(c.loss.tau == 0.07);
  CHECK(c.run.out_dir == "elsewhere");
  cli::apply_assignment(c, "model.video.schedule=[{dim: 16, heads: 2, temporal_window: 8}, "
                           "{dim: 16, heads: 2, temporal_window: 32}]");
  REQUIRE(c.model.video.schedule.stages.size() == 2);
  CHECK(c.model.video.schedule.stages[0].dim == 16);
  CHECK(c.model.video.schedule.stages[1].temporal_window == 32);
  CHECK(c.model.video.schedule.stages[1].layers == 1);
}

TEST_CASE("invalid configurations exit nonzero naming the key") {
  const fs::path dir = fresh_dir("invalid");
  const auto r = run(cat({"gen-data"}, cat(small(dir), {"--set", "optim.batch_size=1"})));
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("optim.batch_size") != std::string::npos);
  const auto bad_schedule = run({"gen-data", "--set", "model.video.schedule=[{temporal_window: 3}]"});
  CHECK(bad_schedule.code == cli::kUsage);
  CHECK(bad_schedule.err.find("model.video.schedule") != std::string::npos);
  CHECK_FALSE(fs::exists(dir));
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"no-such-command"}).code == cli::kUsage);
}

TEST_CASE("file, --set, HTWA_SEED and --seed apply in increasing precedence") {
  const fs::path dir = fresh_dir("precedence");
  fs::create_directories(dir);
  const fs::path file = dir / "run.cfg";
  io::write_file(file.string(), "run:\n  seed: 3\nloss:\n  tau: 0.2\n  lambda1: 0.5\n");
  auto seed_of = [](const std::string& dump) {
    const auto run_at = dump.find("run:");
    const auto at = dump.find("seed: ", run_at);
    return std::stoull(dump.substr(at + 6));
  };
  auto dump = run({"--dump-config", "--config", file.string(), "--set", "loss.tau=0.3"}).out;
  CHECK(seed_of(dump) == 3);
  CHECK(dump.find("tau: 0.3") != std::string::npos);
  CHECK(dump.find("lambda1: 0.5") != std::string::npos);
  {
    ScopedEnv env("HTWA_SEED", "11");
    CHECK(seed_of(run({"--dump-config", "--config", file.string(), "--set", "run.seed=5"}).out) == 11);
    CHECK(seed_of(run({"--dump-config", "--config", file.string(), "--seed", "12"}).out) == 12);
  }
  {
    ScopedEnv env("HTWA_SEED", "x1");
    const auto r = run({"--dump-config"});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("HTWA_SEED") != std::string::npos);
  }
}

TEST_CASE("dry runs validate and print the plan without touching files") {
  const fs::path dir = fresh_dir("dry");
  for (const char* cmd : {"gen-data", "train-stage1", "gradcheck", "analyze-cost"}) {
    CAPTURE(cmd);
    const auto r = run(cat({cmd, "--dry-run"}, small(dir)));
    CHECK(r.code == 0);
    CHECK(r.out.find("dry run") != std::string::npos);
  }
  CHECK_FALSE(fs::exists(dir));
  CHECK(run(cat({"train-stage2", "--dry-run"}, small(dir))).code == cli::kUsage);
  CHECK(run(cat({"eval-retrieval", "--dry-run"}, small(dir))).code == cli::kUsage);
  CHECK_FALSE(fs::exists(dir));
}

TEST_CASE("train-stage2 without a stage-1 checkpoint fails naming the path") {
  const fs::path dir = fresh_dir("nockpt");
  const auto r = run(cat({"train-stage2"}, small(dir)));
  CHECK(r.code != 0);
  CHECK(r.err.find((dir / "stage1.ckpt").string()) != std::string::npos);
  const auto e = run(cat({"train-stage1"}, small(dir)));
  CHECK(e.code != 0);
  CHECK(e.err.find((dir / "data.shard").string()) != std::string::npos);
}

TEST_CASE("analyze-cost writes one CSV row per stage") {
  const fs::path dir = fresh_dir("cost");
  const auto r = run({"analyze-cost", "--schedule", "2,4,8,16,32", "--frames", "32", "--set",
                      "run.out_dir=" + dir.string()});
  REQUIRE(r.code == 0);
  std::istringstream csv(slurp(dir / "cost.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 5);
  CHECK(r.out.find("total:") != std::string::npos);
  CHECK(run({"analyze-cost", "--schedule", "2,x", "--set", "run.out_dir=" + dir.string()}).code == cli::kUsage);
  CHECK(run({"analyze-cost", "--schedule", "3,32", "--set", "run.out_dir=" + dir.string()}).code == cli::kUsage);
}

TEST_CASE("gradcheck subcommand passes on the default configuration and writes a report") {
  const fs::path dir = fresh_dir("gradcheck");
  const auto r = run({"gradcheck", "--set", "run.out_dir=" + dir.string()});
  CHECK(r.code == 0);
  const std::string report = slurp(dir / "gradcheck.txt");
  CHECK(report.find("0 failures") != std::string::npos);
  CHECK(report.find("PASS") != std::string::npos);
}

TEST_CASE("every subcommand repeated with the same config and seed gives byte-identical artifacts") {
  std::vector<std::map<std::string, std::string>> artifacts;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = fresh_dir("determinism" + std::to_string(rep));
    const auto args = cat(small(dir), {"--seed", "4"});
    for (const char* cmd : {"gen-data", "train-stage1", "train-stage2", "eval-retrieval", "analyze-cost"}) {
      const auto r = run(cat({cmd}, args));
      INFO(cmd << ": " << r.err);
      REQUIRE(r.code == 0);
    }
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) files[entry.path().filename().string()] = slurp(entry.path());
    artifacts.push_back(files);
  }
  for (const char* name : {"data.shard", "stage1.ckpt", "stage1_metrics.csv", "stage2.ckpt", "stage2_metrics.csv",
                           "retrieval.csv", "cost.csv"}) {
    CAPTURE(name);
    REQUIRE(artifacts[0].count(name) == 1);
    CHECK(artifacts[0][name] == artifacts[1][name]);
  }
  CHECK(artifacts[0].size() == artifacts[1].size());
}
