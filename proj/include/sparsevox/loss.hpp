// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "sparsevox/groups.hpp"
#include "sparsevox/model.hpp"

namespace sparsevox {

struct AmSoftmaxConfig {
  double margin = 0.2;
  double scale = 30.0;

  void validate() const {
    if (margin < 0 || margin >= 1) throw Error("AM-softmax margin must be in [0,1)");
    if (!(scale > 0) || !std::isfinite(scale))
      throw Error("AM-softmax scale must be positive and finite");
  }
};

struct GroupLassoConfig {
  double lambda = 0.0;
};

/// Cutoff below which a group's L2 norm is treated as 0 for the subgradient.
constexpr double kGroupNormEps = 1e-12;

/// Gradient accumulator shaped like a model's tensors.
struct Gradients {
  std::vector<Eigen::MatrixXd> W;
  std::vector<Eigen::VectorXd> b;
  Eigen::MatrixXd W_seg;
  Eigen::VectorXd b_seg;
  Eigen::MatrixXd W_cls;

  static Gradients zeros_like(const ModelParams& p) {
    Gradients g;
    for (const auto& w : p.W) g.W.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    for (const auto& v : p.b) g.b.push_back(Eigen::VectorXd::Zero(v.size()));
    g.W_seg = Eigen::MatrixXd::Zero(p.W_seg.rows(), p.W_seg.cols());
    g.b_seg = Eigen::VectorXd::Zero(p.b_seg.size());
    g.W_cls = Eigen::MatrixXd::Zero(p.W_cls.rows(), p.W_cls.cols());
    return g;
  }

  Gradients& operator+=(const Gradients& o) {
    for (size_t i = 0; i < W.size(); ++i) W[i] += o.W[i];
    for (size_t i = 0; i < b.size(); ++i) b[i] += o.b[i];
    W_seg += o.W_seg;
    b_seg += o.b_seg;
    W_cls += o.W_cls;
    return *this;
  }

  Gradients& operator*=(double k) {
    for (auto& m : W) m *= k;
    for (auto& v : b) v *= k;
    W_seg *= k;
    b_seg *= k;
    W_cls *= k;
    return *this;
  }
};

/// AM-softmax on precomputed cosine logits: subtract the margin from the
/// target cosine, scale everything by s, softmax cross-entropy.
/// Returns the loss and its gradient with respect to the raw cosines.
inline std::pair<double, Eigen::VectorXd> am_softmax(const Eigen::VectorXd& logits,
                                                     int label,
                                                     const AmSoftmaxConfig& cfg) {
  cfg.validate();
  const auto N = logits.size();
  if (label < 0 || label >= N) throw Error("am_softmax: label out of range");
  Eigen::VectorXd z = cfg.scale * logits;
  z[label] = cfg.scale * (logits[label] - cfg.margin);
  const double zmax = z.maxCoeff();
  const Eigen::VectorXd ez = (z.array() - zmax).exp();
  const double sum = ez.sum();
  const double loss = std::log(sum) + zmax - z[label];
  Eigen::VectorXd grad = cfg.scale / sum * ez;
  grad[label] -= cfg.scale;
  return {loss, grad};
}

/// Eq-style group Lasso penalty over layers 1-4: λ · Σ_k ‖w_k‖₂, with the
/// subgradient λ·w_k/‖w_k‖ for groups whose norm exceeds ε_g (zero below).
/// Adds the subgradient into `grad` and returns the penalty.
inline double group_lasso(const ModelParams& p, const GroupPartition& part,
                          const GroupLassoConfig& cfg, Gradients* grad = nullptr) {
  if (!std::isfinite(cfg.lambda) || cfg.lambda < 0)
    throw Error("group Lasso lambda must be finite and >= 0");
  double penalty = 0.0;
  for (const Group& g : part.groups) {
    if (g.layer >= static_cast<int>(p.W.size()) ||
        g.col + g.len > p.W[g.layer].cols() || g.row >= p.W[g.layer].rows())
      throw Error("group partition does not match model shape");
    const auto w = p.W[g.layer].row(g.row).segment(g.col, g.len);
    const double norm = w.norm();
    penalty += norm;
    if (grad && cfg.lambda > 0 && norm > kGroupNormEps)
      grad->W[g.layer].row(g.row).segment(g.col, g.len) += (cfg.lambda / norm) * w;
  }
  return cfg.lambda * penalty;
}

struct TrainExample {
  Eigen::MatrixXd feats;  // T x feat_dim
  int label = 0;
};

namespace detail {

/// Backward through one utterance given dL/d(embedding); accumulates into g.
inline void backprop_utterance(const ModelParams& p, const Eigen::MatrixXd& feats,
                               const ForwardCache<double>& cache,
                               const Eigen::VectorXd& d_emb, Gradients& g) {
  // segment affine: e = W_seg * pooled + b_seg
  g.W_seg += d_emb * cache.pooled.transpose();
  g.b_seg += d_emb;
  Eigen::VectorXd d_pooled = p.W_seg.transpose() * d_emb;

  // stats pooling: pooled = [mean; std], population variance, floored
  const Eigen::MatrixXd h = cache.pre.back().cwiseMax(0.0);
  const auto T = h.rows();
  const int d = static_cast<int>(h.cols());
  Eigen::MatrixXd d_h(T, d);
  for (int c = 0; c < d; ++c) {
    const double mean = cache.pooled[c];
    const double stddev = cache.pooled[d + c];
    const double d_mean = d_pooled[c];
    const double d_std = d_pooled[d + c];
    // d var/d h(t,c) = 2(h-mean)/T (the mean term cancels); no gradient when
    // the variance sits on the floor
    const bool floored = stddev * stddev <= kVarianceFloor;
    for (Eigen::Index t = 0; t < T; ++t) {
      double v = d_mean / static_cast<double>(T);
      if (!floored)
        v += d_std * (h(t, c) - mean) / (stddev * static_cast<double>(T));
      d_h(t, c) = v;
    }
  }

  // frame layers, last to first
  Eigen::MatrixXd d_act = std::move(d_h);
  for (int l = static_cast<int>(p.W.size()) - 1; l >= 0; --l) {
    const Eigen::MatrixXd d_pre =
        (cache.pre[l].array() > 0.0).select(d_act, Eigen::MatrixXd::Zero(d_act.rows(), d_act.cols()));
    g.W[l] += d_pre.transpose() * cache.spliced[l];
    g.b[l] += d_pre.colwise().sum().transpose();
    const Eigen::MatrixXd d_spliced = d_pre * p.W[l];

    const auto& offsets = p.topo.layers[l].offsets;
    const int in_dim = p.topo.layers[l].in_dim;
    const Eigen::Index T_in =
        l > 0 ? cache.pre[l - 1].rows() : feats.rows();
    Eigen::MatrixXd d_in = Eigen::MatrixXd::Zero(T_in, in_dim);
    for (size_t i = 0; i < offsets.size(); ++i) {
      const int shift = offsets[i] - offsets.front();
      d_in.middleRows(shift, d_spliced.rows()) +=
          d_spliced.middleCols(static_cast<int>(i) * in_dim, in_dim);
    }
    if (l == 0) break;  // no gradient into the input features
    // push through the previous ReLU when we get there (next iteration uses pre[l-1])
    d_act = std::move(d_in);
  }
}

/// Loss and gradient of one example (AM-softmax through the full network).
inline double example_loss_grad(const ModelParams& p, const TrainExample& ex,
                                const AmSoftmaxConfig& am, Gradients& g) {
  const ForwardCache<double> cache = tdnn_forward(p, ex.feats);
  const Eigen::VectorXd& e = cache.embedding;
  const double e_norm = e.norm();
  if (e_norm == 0.0) throw Error("degenerate zero embedding during training");
  const Eigen::VectorXd e_hat = e / e_norm;

  const auto N = p.W_cls.rows();
  Eigen::VectorXd cosines(N), w_norms(N);
  for (Eigen::Index j = 0; j < N; ++j) {
    w_norms[j] = p.W_cls.row(j).norm();
    if (w_norms[j] == 0.0) throw Error("zero-norm classifier row");
    cosines[j] = p.W_cls.row(j).dot(e) / (w_norms[j] * e_norm);
  }

  auto [loss, d_cos] = am_softmax(cosines, ex.label, am);

  // quotient rule through both normalizations:
  //   d cos_j / d e   = (ŵ_j − cos_j ê)/‖e‖
  //   d cos_j / d w_j = (ê − cos_j ŵ_j)/‖w_j‖
  Eigen::VectorXd d_emb = Eigen::VectorXd::Zero(e.size());
  for (Eigen::Index j = 0; j < N; ++j) {
    const Eigen::VectorXd w_hat = p.W_cls.row(j).transpose() / w_norms[j];
    d_emb += d_cos[j] / e_norm * (w_hat - cosines[j] * e_hat);
    g.W_cls.row(j) +=
        (d_cos[j] / w_norms[j] * (e_hat - cosines[j] * w_hat)).transpose();
  }
  backprop_utterance(p, ex.feats, cache, d_emb, g);
  return loss;
}

}  // namespace detail

/// Total objective: mean AM-softmax loss over the batch plus the group Lasso
/// penalty; gradient covers every tensor, including the classifier head.
inline std::pair<double, Gradients> total_loss(std::span<const TrainExample> batch,
                                               const ModelParams& p,
                                               const AmSoftmaxConfig& am,
                                               const GroupPartition& part,
                                               const GroupLassoConfig& gl) {
  if (batch.empty()) throw Error("total_loss: empty batch");
  Gradients g = Gradients::zeros_like(p);
  double data_loss = 0.0;
  for (const TrainExample& ex : batch)
    data_loss += detail::example_loss_grad(p, ex, am, g);
  const double inv = 1.0 / static_cast<double>(batch.size());
  data_loss *= inv;
  g *= inv;
  const double penalty = group_lasso(p, part, gl, &g);
  return {data_loss + penalty, std::move(g)};
}

/// Data term alone (no penalty), for validation metrics.
inline double data_loss(std::span<const TrainExample> batch, const ModelParams& p,
                        const AmSoftmaxConfig& am) {
  if (batch.empty()) throw Error("data_loss: empty batch");
  double total = 0.0;
  for (const TrainExample& ex : batch) {
    const auto cache = tdnn_forward(p, ex.feats);
    const auto logits = classify_logits(p, cache.embedding);
    total += am_softmax(logits, ex.label, am).first;
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace sparsevox
