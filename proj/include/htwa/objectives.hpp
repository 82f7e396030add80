#pragma once

// Training losses. All similarities are s(a, b) = a . b / tau on unit rows.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "htwa/config.hpp"
#include "htwa/engine.hpp"
#include "htwa/rng.hpp"

namespace htwa::objectives {

double similarity(std::span<const double> f1, std::span<const double> f2, double tau);
// [n, d] x [m, d] -> [n, m] of a_i . b_j / tau.
engine::DiffArray similarity_matrix(const engine::DiffArray& a, const engine::DiffArray& b, double tau);

// ---------------------------------------------------------------------------
// Temporal contrastive loss between the M clip and M sentence
// representations of one sample.

struct RepRef {
  std::size_t sample = 0;
  std::size_t position = 0;
  bool operator==(const RepRef&) const = default;
};

struct MtcPlan {
  std::vector<std::size_t> anchors;     // positions p of the anchor side, distinct
  std::vector<std::size_t> candidates;  // positions q of the other side, distinct
  std::vector<RepRef> negatives;        // reps of other samples, other side
};

// Candidate minimising |p - q|; ties go to the smaller q. Rejects an empty set.
std::size_t select_positive(std::size_t anchor, const std::vector<std::size_t>& candidates);

// anchors: [M, d], candidates: [M, d], negatives: [n, d] or undefined.
// Mean over plan.anchors of -log softmax over (candidates in plan, negatives).
engine::DiffArray mtc_pair_loss(const engine::DiffArray& anchors, const engine::DiffArray& candidates,
                                const engine::DiffArray& negatives, const MtcPlan& plan, double tau);

struct MtcBatchPlan {
  std::vector<MtcPlan> v2t;  // clip anchors, sentence candidates/negatives
  std::vector<MtcPlan> t2v;  // sentence anchors, clip candidates/negatives
};

// Each sample's plan is drawn from its own stream derive_seed(seed, key[i]),
// so equal keys give equal anchors and candidates. Negatives come uniformly
// from other samples of the batch; with a single sample they are dropped
// (a warning is printed to stderr).
MtcBatchPlan sample_mtc_plan(std::size_t clips, const std::vector<std::uint64_t>& keys, const LossConfig& loss,
                             std::uint64_t seed);

// clip_reps, sentence_reps: [B, M, d]. Average of the per-direction batch means.
engine::DiffArray mtc_batch_loss(const engine::DiffArray& clip_reps, const engine::DiffArray& sentence_reps,
                                 const MtcBatchPlan& plan, double tau);

// Symmetric in-batch InfoNCE between video [B, d] and paragraph [B, d] rows.
engine::DiffArray global_contrastive(const engine::DiffArray& video, const engine::DiffArray& text, double tau);

// Mean cross-entropy over predicted positions; 0 (with a warning) when none.
engine::DiffArray mlm_loss(const engine::DiffArray& logits, const std::vector<std::uint32_t>& labels);
engine::DiffArray vtm_loss(const engine::DiffArray& logits, const std::vector<std::size_t>& labels);

engine::DiffArray stage1_loss(const engine::DiffArray& global, const engine::DiffArray& mtc, double lambda1);
engine::DiffArray stage2_loss(const engine::DiffArray& mlm, const engine::DiffArray& vtm, double lambda2);

}  // namespace htwa::objectives
