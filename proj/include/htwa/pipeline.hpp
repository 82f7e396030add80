#pragma once

// Two-stage training, checkpoints, metrics logs, retrieval evaluation and
// the end-to-end gradient check.
//
// Stage 1 trains the two-stream model (groups text, video, head) on the
// global contrastive loss plus lambda1 times the temporal loss. Stage 2
// freezes those groups and trains the fusion model (cross, mlm, vtm) on MLM
// plus lambda2 times VTM.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "htwa/config.hpp"
#include "htwa/data.hpp"
#include "htwa/encoders.hpp"
#include "htwa/gradcheck.hpp"
#include "htwa/params.hpp"

namespace htwa::pipeline {

inline const std::vector<std::string> kStage1Groups{"text", "video", "head"};
inline const std::vector<std::string> kStage2Groups{"cross", "mlm", "vtm"};

// Decoupled weight decay Adam over a fixed list of parameter paths.
class AdamW {
 public:
  AdamW(const OptimConfig& config, std::vector<std::string> paths);
  // Applies one update with learning rate `lr` to every listed parameter
  // that holds a gradient.
  void step(ParamStore& store, double lr);
  std::size_t steps() const { return steps_; }
  const std::vector<std::string>& paths() const { return paths_; }

 private:
  OptimConfig config_;
  std::vector<std::string> paths_;
  std::map<std::string, std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

// Linear warmup from 0 at step 0 to `peak` at step `warmup`, then linear
// decay to 0 at step `total`.
double learning_rate(std::size_t step, std::size_t total, std::size_t warmup, double peak);
// Steps in one pass over the training split (the default warmup).
std::size_t steps_per_epoch(std::size_t train_size, std::size_t batch_size);

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  std::optional<double> loss_global, loss_mtc, loss_mlm, loss_vtm;
};

// Columns: step, lr, loss_total, loss_global, loss_mtc, loss_mlm, loss_vtm;
// values printed with %.17g, losses a stage does not compute left empty.
std::string metrics_csv(const std::vector<MetricsRow>& rows);
void write_text_file(const std::string& path, const std::string& contents);

struct CheckpointInfo {
  std::uint32_t stage = 0;
  std::uint64_t step = 0;
};

// "HTWACKPT", u32 version, u32 stage, u64 step, u64 count, then per entry
// u32 path length, path bytes, u32 rank, u64 dims, f64 values (little-endian).
void save_checkpoint(const ParamStore& store, const CheckpointInfo& info, const std::string& path);
// Copies every stored array into the matching existing parameter. Throws on
// a missing file, unknown path or shape mismatch.
CheckpointInfo load_checkpoint(ParamStore& store, const std::string& path);

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Model, parameters and optimizer of one run.
struct TrainState {
  Config config;
  ParamStore store;
  encoders::VideoLanguageModel model;
  std::vector<std::string> frozen_groups;
  std::size_t step = 0;
  std::uint32_t stage = 0;
};

// Fresh state; parameters initialised from derive_seed(model.init_seed, run.seed).
TrainState init_state(const Config& config);

struct StepLosses {
  engine::DiffArray total;
  double global = 0.0, mtc = 0.0, mlm = 0.0, vtm = 0.0;
};

// Inputs of one step with the video subsampled to the model's clip length.
struct StepBatch {
  std::vector<const data::PairedSample*> samples;
  data::TextBatch text;
  data::VideoBatch video;
};
StepBatch make_step_batch(const TrainState& state, const data::Dims& dims,
                          std::vector<const data::PairedSample*> samples);

// Recorded on the active tape, if any. `step_seed` drives MTC sampling,
// masking and VTM pairing.
StepLosses stage1_losses(const TrainState& state, const StepBatch& batch, std::uint64_t step_seed);
StepLosses stage2_losses(const TrainState& state, const StepBatch& batch, std::uint64_t step_seed);

struct TrainOptions {
  std::size_t steps = 0;              // 0: the configured stage budget
  std::string checkpoint_path;        // empty: no checkpoint written
  std::string metrics_path;           // empty: no CSV written
  std::function<void(const MetricsRow&)> on_step;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::uint64_t frozen_digest_before = 0;
  std::uint64_t frozen_digest_after = 0;
};

// Both rethrow DivergenceError after saving the last finite parameters to
// the checkpoint path.
TrainResult train_stage1(TrainState& state, const data::Dataset& dataset, const TrainOptions& options = {});
// Requires a state holding stage-1 parameters; freezes kStage1Groups.
TrainResult train_stage2(TrainState& state, const data::Dataset& dataset, const TrainOptions& options = {});

struct RetrievalReport {
  double r1 = 0.0;  // fractions in [0, 1]
  double r5 = 0.0;
  double median_rank = 0.0;
  std::size_t count = 0;
};

// sim[i][j]: paragraph i against video j; the true match is j == i. A
// video tied with the true match ranks ahead of it.
RetrievalReport retrieval_from_similarity(const std::vector<std::vector<double>>& sim);
// Paragraph-to-video retrieval with the global representations.
RetrievalReport eval_retrieval(const TrainState& state, const std::vector<data::PairedSample>& split,
                               const data::Dims& dims, std::size_t batch_size = 50);

// Fraction of correctly classified pairs, half of them replaced, on `split`.
double eval_vtm_accuracy(const TrainState& state, const std::vector<data::PairedSample>& split,
                         const data::Dims& dims, std::uint64_t seed, std::size_t batch_size = 50);
// Mean MLM loss over `split` with a fixed masking seed.
double eval_mlm_loss(const TrainState& state, const std::vector<data::PairedSample>& split, const data::Dims& dims,
                     std::uint64_t seed, std::size_t batch_size = 50);

struct GradcheckAllOptions {
  std::uint64_t seed = 0;
  double fraction = 0.01;     // of all trainable elements, besides every head element
  std::size_t batch = 3;
  gradcheck::Options tolerances;
  // Applied to the loss before checking; lets a test inject a faulty op.
  std::function<engine::DiffArray(const engine::DiffArray&)> loss_hook;
};

struct GradcheckAllReport {
  gradcheck::Report report;
  std::size_t parameters_checked = 0;
};

// End-to-end finite-difference check of d(stage-1 loss)/d(parameters).
GradcheckAllReport gradcheck_all(const Config& config, const GradcheckAllOptions& options = {});

// The configuration used by gradcheck_all when given the toy defaults:
// same structure with every width shrunk.
Config tiny_config(const Config& base);

}  // namespace htwa::pipeline
