// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "sparsevox/eval.hpp"
#include "sparsevox/groups.hpp"
#include "sparsevox/loss.hpp"
#include "sparsevox/model.hpp"
#include "sparsevox/synth.hpp"

namespace sparsevox {

/// Training blew up numerically (NaN loss or gradient). Callers map this to
/// its own process exit code and keep the last finished checkpoint.
struct DivergenceError : Error {
  using Error::Error;
};

enum class Stage { Baseline, Sparsify, FineTune };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Baseline: return "baseline";
    case Stage::Sparsify: return "sparsify";
    case Stage::FineTune: return "finetune";
  }
  throw Error("unknown stage");
}

struct TrainConfig {
  Stage stage = Stage::Baseline;
  int epochs = 30;
  double lr_start = 0.01;
  double lr_end = 0.0001;
  double weight_decay = 1e-6;
  double momentum = 0.0;  // the reference recipe is plain SGD
  int batch_size = 256;
  double segment_min = 2.5;  // seconds; crops clamp to the utterance
  double segment_max = 3.0;
  uint64_t seed = 1;
  int jobs = 1;  // workers for batch gradients; 1 is bit-reproducible
  AmSoftmaxConfig am;

  // sparsify stage only
  double lambda = 0.0;
  Granularity granularity = Granularity::Chunk8;
  double tau_abs = 1e-3;

  void validate() const {
    am.validate();
    if (!(lr_start >= lr_end) || !(lr_end > 0.0))
      throw Error("train config: need lr_start >= lr_end > 0");
    if (epochs < 1) throw Error("train config: epochs must be at least 1");
    if (batch_size < 1) throw Error("train config: batch_size must be at least 1");
    if (!(segment_min <= segment_max) || !(segment_min > 0.0))
      throw Error("train config: bad segment range");
    if (jobs < 1) throw Error("train config: jobs must be at least 1");
    if (!(weight_decay >= 0.0) || !(momentum >= 0.0) || momentum >= 1.0)
      throw Error("train config: bad weight_decay or momentum");
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw Error("train config: lambda must be finite and nonnegative");
    if (!(tau_abs >= 0.0)) throw Error("train config: tau_abs must be nonnegative");
  }
};

/// Cosine-annealed learning rate. Written as a convex combination so the
/// endpoints are exact in floating point: epoch 0 gives lr_start, the last
/// epoch gives lr_end.
inline double cosine_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) throw Error("cosine_lr: epoch out of range");
  if (cfg.epochs == 1) return cfg.lr_start;
  const double t =
      0.5 * (1.0 + std::cos(M_PI * epoch / static_cast<double>(cfg.epochs - 1)));
  return t * cfg.lr_start + (1.0 - t) * cfg.lr_end;
}

/// One SGD update, w <- w - lr*(g + weight_decay*w). When a frozen mask is
/// given, its groups receive no update: their gradient entries are dropped,
/// and since masked weights enter at exactly 0 (run_stage applies the mask
/// up front) the decay term is 0 too, so they stay exactly 0.
inline void sgd_step(ModelParams& p, Gradients& g, double lr, double weight_decay,
                     double momentum = 0.0, Gradients* velocity = nullptr,
                     const GroupPartition* part = nullptr,
                     const SparsityMask* frozen = nullptr) {
  auto check = [](const char* name, bool finite) {
    if (!finite)
      throw DivergenceError(std::string("non-finite gradient in ") + name);
  };
  for (size_t l = 0; l < g.W.size(); ++l) {
    check("a frame layer weight", g.W[l].allFinite());
    check("a frame layer bias", g.b[l].allFinite());
  }
  check("segment.W", g.W_seg.allFinite());
  check("segment.b", g.b_seg.allFinite());
  check("softmax.W", g.W_cls.allFinite());

  if (frozen != nullptr) {
    if (part == nullptr) throw Error("sgd_step: frozen mask without partition");
    check_mask(*part, *frozen);
    for (int k = 0; k < part->size(); ++k) {
      if (!frozen->zeroed[k]) continue;
      const Group& grp = part->groups[k];
      g.W[grp.layer].row(grp.row).segment(grp.col, grp.len).setZero();
    }
  }

  if (momentum > 0.0 && velocity == nullptr)
    throw Error("sgd_step: momentum needs velocity state");
  auto update = [&]<typename T>(T& w, const T& gw, T* v) {
    if (momentum > 0.0) {
      *v = momentum * *v + (gw + weight_decay * w);
      w -= lr * *v;
    } else {
      w -= lr * (gw + weight_decay * w);
    }
  };

  for (size_t l = 0; l < p.W.size(); ++l) {
    update(p.W[l], g.W[l], velocity ? &velocity->W[l] : nullptr);
    update(p.b[l], g.b[l], velocity ? &velocity->b[l] : nullptr);
  }
  update(p.W_seg, g.W_seg, velocity ? &velocity->W_seg : nullptr);
  update(p.b_seg, g.b_seg, velocity ? &velocity->b_seg : nullptr);
  update(p.W_cls, g.W_cls, velocity ? &velocity->W_cls : nullptr);
}

// ---------------------------------------------------------------------------
// Segment cropping

namespace detail {

/// Uniform crop of `frames` rows: length drawn from [min_f, max_f], clamped
/// to the utterance and floored at the receptive-field minimum, then a
/// uniform start. Always consumes exactly two rng draws.
inline std::pair<int, int> draw_segment(int frames, int min_f, int max_f,
                                        int floor_f, Rng& rng) {
  if (frames < floor_f) throw Error("utterance shorter than the receptive field");
  int len = min_f + rng.uniform_int(max_f - min_f + 1);
  len = std::clamp(len, floor_f, frames);
  const int start = rng.uniform_int(frames - len + 1);
  return {start, len};
}

}  // namespace detail

inline FeatureMatrix sample_segment(const FeatureMatrix& utt, double min_seconds,
                                    double max_seconds, Rng& rng,
                                    int floor_frames = 13) {
  if (!(min_seconds <= max_seconds) || !(min_seconds > 0.0))
    throw Error("sample_segment: bad length range");
  const int min_f = static_cast<int>(std::lround(min_seconds / utt.frame_shift));
  const int max_f = static_cast<int>(std::lround(max_seconds / utt.frame_shift));
  auto [start, len] = detail::draw_segment(utt.num_frames(), min_f, max_f,
                                           floor_frames, rng);
  FeatureMatrix out;
  out.frame_shift = utt.frame_shift;
  out.frames = utt.frames.middleRows(start, len);
  return out;
}

// ---------------------------------------------------------------------------
// Data plumbing

struct TrainSet {
  std::vector<Eigen::MatrixXd> feats;
  std::vector<int> labels;
  int n_classes = 0;
};

struct EvalSet {
  std::vector<std::string> ids;
  std::vector<Eigen::MatrixXd> feats;
  TrialList trials;
};

inline TrainSet to_train_set(const std::vector<Utterance>& utts) {
  TrainSet set;
  for (const auto& u : utts) {
    if (u.speaker < 0) throw Error("negative speaker label");
    set.feats.push_back(u.feats.frames.cast<double>());
    set.labels.push_back(u.speaker);
    set.n_classes = std::max(set.n_classes, u.speaker + 1);
  }
  return set;
}

/// Hold out the last `n_val` utterances of every speaker.
inline std::pair<std::vector<Utterance>, std::vector<Utterance>> split_per_speaker(
    const std::vector<Utterance>& utts, int n_val) {
  std::map<int, int> seen, total;
  for (const auto& u : utts) ++total[u.speaker];
  std::vector<Utterance> train, val;
  for (const auto& u : utts) {
    const int k = seen[u.speaker]++;
    if (k >= total[u.speaker] - n_val)
      val.push_back(u);
    else
      train.push_back(u);
  }
  return {std::move(train), std::move(val)};
}

/// Build a fixed verification protocol over held-out utterances.
inline EvalSet make_eval_set(const std::vector<Utterance>& utts, int n_target,
                             int n_nontarget, uint64_t seed) {
  EvalSet set;
  std::vector<std::pair<std::string, std::string>> utt_speaker;
  for (size_t i = 0; i < utts.size(); ++i) {
    set.ids.push_back("val" + std::to_string(i));
    set.feats.push_back(utts[i].feats.frames.cast<double>());
    utt_speaker.emplace_back(set.ids.back(),
                             "spk" + std::to_string(utts[i].speaker));
  }
  set.trials = sample_trials(utt_speaker, n_target, n_nontarget, seed);
  return set;
}

inline EmbeddingMap embed_all(const ModelParams& p, const EvalSet& set) {
  EmbeddingMap embs;
  for (size_t i = 0; i < set.ids.size(); ++i)
    embs[set.ids[i]] = embed_utterance(p, set.feats[i]).cast<float>();
  return embs;
}

inline double validation_eer(const ModelParams& p, const EvalSet& set) {
  return eer(score_trials(embed_all(p, set), set.trials));
}

// ---------------------------------------------------------------------------
// Stage driver

struct EpochMetrics {
  Stage stage = Stage::Baseline;
  int epoch = 0;
  double lr = 0.0;
  double loss_data = 0.0;
  double loss_penalty = 0.0;
  std::array<double, kSparseLayers> layer_sparsity{};  // zero-group fraction
  double val_eer = std::numeric_limits<double>::quiet_NaN();
};

struct StageResult {
  ModelParams params;            // after the last epoch (masked for Sparsify)
  ModelParams best_params;       // lowest validation EER; == params without val
  SparsityMask mask;             // Sparsify output, or the frozen input
  std::vector<EpochMetrics> log;
  int best_epoch = -1;
  double best_val_eer = std::numeric_limits<double>::quiet_NaN();
};

inline std::string metrics_csv_header() {
  return "stage,epoch,lr,loss_ED,loss_GL,sparsity_l1,sparsity_l2,sparsity_l3,"
         "sparsity_l4,val_eer";
}

inline std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream out;
  out.precision(10);
  out << to_string(m.stage) << ',' << m.epoch << ',' << m.lr << ','
      << m.loss_data << ',' << m.loss_penalty;
  for (double f : m.layer_sparsity) out << ',' << f;
  out << ',';
  if (!std::isnan(m.val_eer)) out << m.val_eer;
  return out.str();
}

namespace detail {

inline uint64_t stage_tag(Stage s) {
  switch (s) {
    case Stage::Baseline: return 1;
    case Stage::Sparsify: return 2;
    case Stage::FineTune: return 3;
  }
  throw Error("unknown stage");
}

/// Fisher-Yates with the project rng, so shuffles are identical across
/// standard libraries.
inline std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
  return idx;
}

/// Mean loss and gradients over the batch. jobs > 1 splits the batch into
/// contiguous slices summed independently and reduced in slice order, which
/// is deterministic for a fixed worker count but only bitwise-stable across
/// machines at jobs = 1 (matching the serial total_loss arithmetic).
inline std::pair<double, Gradients> batch_loss_grad(
    const std::vector<TrainExample>& batch, const ModelParams& p,
    const AmSoftmaxConfig& am, const GroupPartition& part,
    const GroupLassoConfig& gl, int jobs) {
  if (jobs <= 1 || batch.size() < 2)
    return total_loss(batch, p, am, part, gl);

  const int workers = std::min<int>(jobs, static_cast<int>(batch.size()));
  std::vector<Gradients> grads;
  std::vector<double> losses(workers, 0.0);
  grads.reserve(workers);
  for (int w = 0; w < workers; ++w) grads.push_back(Gradients::zeros_like(p));

  std::vector<std::thread> pool;
  const size_t per = (batch.size() + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const size_t lo = w * per;
      const size_t hi = std::min(batch.size(), lo + per);
      for (size_t i = lo; i < hi; ++i)
        losses[w] += detail::example_loss_grad(p, batch[i], am, grads[w]);
    });
  }
  for (auto& t : pool) t.join();

  Gradients g = std::move(grads[0]);
  double data = losses[0];
  for (int w = 1; w < workers; ++w) {
    g += grads[w];
    data += losses[w];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  g *= inv;
  data *= inv;
  const double penalty = group_lasso(p, part, gl, &g);
  return {data + penalty, std::move(g)};
}

}  // namespace detail

using EpochCallback =
    std::function<void(const EpochMetrics&, const ModelParams&)>;

/// Run one training stage. Baseline minimizes the data term; Sparsify adds
/// the group Lasso penalty and thresholds a mask from the final weights;
/// FineTune minimizes the data term with `frozen` groups pinned at zero.
/// The callback fires after every epoch with current metrics and weights.
inline StageResult run_stage(const TrainConfig& cfg, const TrainSet& train,
                             const EvalSet* val, ModelParams init,
                             const SparsityMask* frozen = nullptr,
                             const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.feats.empty()) throw Error("run_stage: empty training set");
  if (train.feats.size() != train.labels.size())
    throw Error("run_stage: feature/label count mismatch");
  if (init.W_cls.rows() < train.n_classes)
    throw Error("run_stage: classifier head smaller than the label set");
  if (cfg.stage == Stage::FineTune && frozen == nullptr)
    throw Error("run_stage: fine-tune requires a mask");

  StageResult res;
  res.params = std::move(init);
  ModelParams& p = res.params;

  const Granularity gran = frozen ? frozen->granularity : cfg.granularity;
  const GroupPartition part = build_groups(p.topo, gran);
  if (frozen != nullptr) {
    check_mask(part, *frozen);
    p = apply_mask(p, part, *frozen);
    res.mask = *frozen;
  } else {
    res.mask = empty_mask(part);
  }

  const GroupLassoConfig gl{cfg.stage == Stage::Sparsify ? cfg.lambda : 0.0};
  const int min_f = p.topo.min_frames();
  const int seg_min =
      static_cast<int>(std::lround(cfg.segment_min / kDefaultFrameShift));
  const int seg_max =
      static_cast<int>(std::lround(cfg.segment_max / kDefaultFrameShift));

  Gradients velocity = Gradients::zeros_like(p);
  const uint64_t tag = detail::stage_tag(cfg.stage);
  const int n = static_cast<int>(train.feats.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg);
    Rng shuffle_rng(mix_seed(cfg.seed, tag, static_cast<uint64_t>(epoch), 0x51));
    Rng crop_rng(mix_seed(cfg.seed, tag, static_cast<uint64_t>(epoch), 0xC2));
    const std::vector<int> order = detail::shuffled_indices(n, shuffle_rng);

    double data_sum = 0.0;
    for (int lo = 0; lo < n; lo += cfg.batch_size) {
      const int hi = std::min(n, lo + cfg.batch_size);
      std::vector<TrainExample> batch;
      batch.reserve(hi - lo);
      for (int k = lo; k < hi; ++k) {
        const Eigen::MatrixXd& full = train.feats[order[k]];
        auto [start, len] = detail::draw_segment(
            static_cast<int>(full.rows()), seg_min, seg_max, min_f, crop_rng);
        batch.push_back({full.middleRows(start, len), train.labels[order[k]]});
      }
      auto [loss, grad] =
          detail::batch_loss_grad(batch, p, cfg.am, part, gl, cfg.jobs);
      if (!std::isfinite(loss))
        throw DivergenceError("loss diverged in stage " +
                              std::string(to_string(cfg.stage)) + ", epoch " +
                              std::to_string(epoch));
      const double pen =
          gl.lambda > 0.0 ? group_lasso(p, part, gl, nullptr) : 0.0;
      data_sum += (loss - pen) * static_cast<double>(hi - lo);
      sgd_step(p, grad, lr, cfg.weight_decay, cfg.momentum, &velocity, &part,
               frozen);
    }

    EpochMetrics m;
    m.stage = cfg.stage;
    m.epoch = epoch;
    m.lr = lr;
    m.loss_data = data_sum / n;
    m.loss_penalty = gl.lambda > 0.0 ? group_lasso(p, part, gl, nullptr) : 0.0;
    if (cfg.stage == Stage::Sparsify) {
      const SparsityMask would =
          threshold_mask(part, group_norms(p, part), cfg.tau_abs);
      const auto rep = sparsity_report(p.topo, part, would);
      for (int l = 0; l < kSparseLayers; ++l)
        m.layer_sparsity[l] = rep.layers[l].fraction;
    } else if (frozen != nullptr) {
      const auto rep = sparsity_report(p.topo, part, *frozen);
      for (int l = 0; l < kSparseLayers; ++l)
        m.layer_sparsity[l] = rep.layers[l].fraction;
    }
    if (val != nullptr) {
      m.val_eer = validation_eer(p, *val);
      if (res.best_epoch < 0 || m.val_eer < res.best_val_eer) {
        res.best_epoch = epoch;
        res.best_val_eer = m.val_eer;
        res.best_params = p;
      }
    }
    res.log.push_back(m);
    if (on_epoch) on_epoch(m, p);
  }

  if (cfg.stage == Stage::Sparsify) {
    res.mask = threshold_mask(part, group_norms(p, part), cfg.tau_abs);
    p = apply_mask(p, part, res.mask);
  }
  if (res.best_epoch < 0) res.best_params = p;
  return res;
}

}  // namespace sparsevox
