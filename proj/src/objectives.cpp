#include "htwa/objectives.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace htwa::objectives {

using engine::DiffArray;

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be > 0, got " + std::to_string(tau));
}

std::vector<std::size_t> arange(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

DiffArray row_of(const DiffArray& x, std::size_t b) {
  return engine::reshape(engine::slice(x, 0, b, 1), {x.dim(1), x.dim(2)});
}

}  // namespace

double similarity(std::span<const double> f1, std::span<const double> f2, double tau) {
  check_tau(tau);
  if (f1.size() != f2.size()) throw std::invalid_argument("similarity: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < f1.size(); ++i) s += f1[i] * f2[i];
  return s / tau;
}

DiffArray similarity_matrix(const DiffArray& a, const DiffArray& b, double tau) {
  check_tau(tau);
  return engine::scale(engine::bmm(a, b, true), 1.0 / tau);
}

std::size_t select_positive(std::size_t anchor, const std::vector<std::size_t>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("select_positive: empty candidate set");
  std::size_t best = candidates.front();
  auto dist = [anchor](std::size_t q) { return anchor > q ? anchor - q : q - anchor; };
  for (std::size_t q : candidates)
    if (dist(q) < dist(best) || (dist(q) == dist(best) && q < best)) best = q;
  return best;
}

DiffArray mtc_pair_loss(const DiffArray& anchors, const DiffArray& candidates, const DiffArray& negatives,
                        const MtcPlan& plan, double tau) {
  check_tau(tau);
  if (plan.anchors.empty()) throw std::invalid_argument("mtc_pair_loss: empty anchor set");
  if (plan.candidates.empty()) throw std::invalid_argument("mtc_pair_loss: empty candidate set");
  std::vector<std::size_t> targets;
  for (std::size_t p : plan.anchors) {
    const std::size_t q = select_positive(p, plan.candidates);
    targets.push_back(static_cast<std::size_t>(
        std::find(plan.candidates.begin(), plan.candidates.end(), q) - plan.candidates.begin()));
  }
  DiffArray a = engine::index_select(anchors, plan.anchors);
  DiffArray c = engine::index_select(candidates, plan.candidates);
  if (negatives.defined() && negatives.dim(0) > 0) c = engine::concat({c, negatives}, 0);
  return engine::cross_entropy(similarity_matrix(a, c, tau), targets);
}

MtcBatchPlan sample_mtc_plan(std::size_t clips, const std::vector<std::uint64_t>& keys, const LossConfig& loss,
                             std::uint64_t seed) {
  const std::size_t B = keys.size();
  if (B == 0) throw std::invalid_argument("sample_mtc_plan: empty batch");
  if (loss.anchors < 1 || loss.anchors > clips || loss.candidates < 1 || loss.candidates > clips)
    throw std::invalid_argument("sample_mtc_plan: anchor and candidate counts must be in [1, " +
                                std::to_string(clips) + "]");
  std::size_t negatives = loss.negatives;
  if (B == 1 && negatives > 0) {
    std::cerr << "warning: batch of 1 has no other samples; MTC negatives disabled\n";
    negatives = 0;
  }
  MtcBatchPlan out;
  for (std::size_t i = 0; i < B; ++i) {
    Rng rng(derive_seed(seed, keys[i]));
    for (auto* plans : {&out.v2t, &out.t2v}) {
      MtcPlan p;
      p.anchors = rng.choose(clips, loss.anchors);
      p.candidates = rng.choose(clips, loss.candidates);
      for (std::size_t n = 0; n < negatives; ++n) {
        std::size_t j = rng.below(B - 1);
        if (j >= i) ++j;
        p.negatives.push_back({j, rng.below(clips)});
      }
      plans->push_back(std::move(p));
    }
  }
  return out;
}

DiffArray mtc_batch_loss(const DiffArray& clip_reps, const DiffArray& sentence_reps, const MtcBatchPlan& plan,
                         double tau) {
  if (clip_reps.rank() != 3 || clip_reps.shape() != sentence_reps.shape())
    throw std::invalid_argument("mtc_batch_loss: reps must both be [B, M, d], got " +
                                engine::shape_str(clip_reps.shape()) + " and " +
                                engine::shape_str(sentence_reps.shape()));
  const std::size_t B = clip_reps.dim(0), M = clip_reps.dim(1), d = clip_reps.dim(2);
  if (plan.v2t.size() != B || plan.t2v.size() != B) throw std::invalid_argument("mtc_batch_loss: plan size mismatch");
  const DiffArray flat_clips = engine::reshape(clip_reps, {B * M, d});
  const DiffArray flat_sentences = engine::reshape(sentence_reps, {B * M, d});
  auto direction = [&](const DiffArray& anchor_side, const DiffArray& other_side, const DiffArray& other_flat,
                       const std::vector<MtcPlan>& plans) {
    std::vector<DiffArray> terms;
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<std::size_t> rows;
      for (const RepRef& r : plans[i].negatives) rows.push_back(r.sample * M + r.position);
      DiffArray negs = rows.empty() ? DiffArray() : engine::index_select(other_flat, rows);
      terms.push_back(engine::reshape(
          mtc_pair_loss(row_of(anchor_side, i), row_of(other_side, i), negs, plans[i], tau), {1}));
    }
    return engine::mean_all(engine::concat(terms, 0));
  };
  DiffArray v2t = direction(clip_reps, sentence_reps, flat_sentences, plan.v2t);
  DiffArray t2v = direction(sentence_reps, clip_reps, flat_clips, plan.t2v);
  return engine::scale(engine::add(v2t, t2v), 0.5);
}

DiffArray global_contrastive(const DiffArray& video, const DiffArray& text, double tau) {
  if (video.rank() != 2 || video.shape() != text.shape())
    throw std::invalid_argument("global_contrastive: expected equal [B, d] inputs, got " +
                                engine::shape_str(video.shape()) + " and " + engine::shape_str(text.shape()));
  const std::size_t B = video.dim(0);
  if (B < 2) throw std::invalid_argument("global_contrastive: needs a batch of at least 2 for negatives");
  const auto targets = arange(B);
  DiffArray v2t = engine::cross_entropy(similarity_matrix(video, text, tau), targets);
  DiffArray t2v = engine::cross_entropy(similarity_matrix(text, video, tau), targets);
  return engine::scale(engine::add(v2t, t2v), 0.5);
}

DiffArray mlm_loss(const DiffArray& logits, const std::vector<std::uint32_t>& labels) {
  if (labels.empty()) {
    std::cerr << "warning: no masked positions; MLM loss is 0 for this batch\n";
    return DiffArray::scalar(0.0);
  }
  return engine::cross_entropy(logits, std::vector<std::size_t>(labels.begin(), labels.end()));
}

DiffArray vtm_loss(const DiffArray& logits, const std::vector<std::size_t>& labels) {
  for (std::size_t l : labels)
    if (l > 1) throw std::invalid_argument("vtm_loss: labels must be 0 or 1");
  if (logits.rank() != 2 || logits.dim(1) != 2)
    throw std::invalid_argument("vtm_loss: expected [B, 2] logits, got " + engine::shape_str(logits.shape()));
  return engine::cross_entropy(logits, labels);
}

DiffArray stage1_loss(const DiffArray& global, const DiffArray& mtc, double lambda1) {
  return engine::add(global, engine::scale(mtc, lambda1));
}

DiffArray stage2_loss(const DiffArray& mlm, const DiffArray& vtm, double lambda2) {
  return engine::add(mlm, engine::scale(vtm, lambda2));
}

}  // namespace htwa::objectives
