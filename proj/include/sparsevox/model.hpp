// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "sparsevox/common.hpp"
#include "sparsevox/features.hpp"

namespace sparsevox {

/// One frame-level TDNN layer: splice the listed context offsets, then an
/// affine map [out_dim x in_dim*|offsets|] and a ReLU.
struct LayerSpec {
  std::string name;
  std::vector<int> offsets;  // strictly increasing
  int in_dim = 0;
  int out_dim = 0;

  int span() const { return offsets.back() - offsets.front(); }
  int spliced_dim() const { return in_dim * static_cast<int>(offsets.size()); }
};

/// The fixed 5-layer architecture, scalable by a width multiplier. Width 1
/// gives hidden 512 / embedding 256; the contexts never change.
struct Topology {
  std::vector<LayerSpec> layers;
  int feat_dim = 40;
  int hidden = 512;
  int emb_dim = 256;
  int n_classes = 0;

  int receptive_field() const {
    int rf = 0;
    for (const auto& l : layers) rf += l.span();
    return rf;
  }
  int min_frames() const { return receptive_field() + 1; }
  int pooled_dim() const { return 2 * hidden; }
};

inline Topology make_topology(double width = 1.0, int n_classes = 0,
                              int feat_dim = 40) {
  if (width <= 0) throw Error("width multiplier must be positive");
  Topology t;
  t.feat_dim = feat_dim;
  t.hidden = std::max(1, static_cast<int>(std::lround(512 * width)));
  t.emb_dim = std::max(1, static_cast<int>(std::lround(256 * width)));
  t.n_classes = n_classes;
  const int h = t.hidden;
  t.layers = {
      {"layer1", {-2, -1, 0, 1, 2}, feat_dim, h},
      {"layer2", {-2, 0, 2}, h, h},
      {"layer3", {-2, 0, 2}, h, h},
      {"layer4", {0}, h, h},
      {"layer5", {0}, h, h},
  };
  return t;
}

/// All learned tensors. Scalar type S is double on the training path (so
/// finite-difference checks are meaningful) and float on the inference path.
template <typename S>
struct TdnnParamsT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  Topology topo;
  std::vector<Mat> W;  // per frame layer, [out_dim x spliced_dim]
  std::vector<Vec> b;  // per frame layer, [out_dim]
  Mat W_seg;           // [emb_dim x 2*hidden]
  Vec b_seg;           // [emb_dim]
  Mat W_cls;           // [n_classes x emb_dim], no bias; empty when n_classes=0

  template <typename S2>
  TdnnParamsT<S2> cast() const {
    TdnnParamsT<S2> out;
    out.topo = topo;
    for (const auto& w : W) out.W.push_back(w.template cast<S2>());
    for (const auto& v : b) out.b.push_back(v.template cast<S2>());
    out.W_seg = W_seg.template cast<S2>();
    out.b_seg = b_seg.template cast<S2>();
    out.W_cls = W_cls.template cast<S2>();
    return out;
  }
};

using ModelParams = TdnnParamsT<double>;

template <typename S>
TdnnParamsT<S> zero_params(const Topology& topo) {
  using Mat = typename TdnnParamsT<S>::Mat;
  using Vec = typename TdnnParamsT<S>::Vec;
  TdnnParamsT<S> p;
  p.topo = topo;
  for (const auto& l : topo.layers) {
    p.W.push_back(Mat::Zero(l.out_dim, l.spliced_dim()));
    p.b.push_back(Vec::Zero(l.out_dim));
  }
  p.W_seg = Mat::Zero(topo.emb_dim, topo.pooled_dim());
  p.b_seg = Vec::Zero(topo.emb_dim);
  p.W_cls = Mat::Zero(topo.n_classes, topo.emb_dim);
  return p;
}

/// He-style init: N(0, 2/fan_in) weights, zero biases, N(0,1) softmax rows.
inline ModelParams random_params(const Topology& topo, uint64_t seed) {
  ModelParams p = zero_params<double>(topo);
  Rng rng(mix_seed(seed, 0xC0DEull));
  auto fill = [&](Eigen::MatrixXd& m, double std) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = std * rng.gauss();
  };
  for (size_t i = 0; i < p.W.size(); ++i)
    fill(p.W[i], std::sqrt(2.0 / p.W[i].cols()));
  fill(p.W_seg, std::sqrt(2.0 / p.W_seg.cols()));
  fill(p.W_cls, 1.0);
  return p;
}

/// Parameter count of the embedding path (layers 1-5 + segment, weights and
/// biases). The classification head is training-only and excluded.
inline int64_t count_params(const Topology& topo) {
  int64_t n = 0;
  for (const auto& l : topo.layers)
    n += static_cast<int64_t>(l.out_dim) * l.spliced_dim() + l.out_dim;
  n += static_cast<int64_t>(topo.emb_dim) * topo.pooled_dim() + topo.emb_dim;
  return n;
}

// ---------------------------------------------------------------------------
// Forward pass.

constexpr double kVarianceFloor = 1e-8;

/// Valid (no padding) splicing: output row t concatenates input rows
/// t + (offset_i - min_offset); T' = T - (max-min).
template <typename Derived>
auto splice(const Eigen::MatrixBase<Derived>& x, const std::vector<int>& offsets) {
  using Mat = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const int span = offsets.back() - offsets.front();
  const int T_out = static_cast<int>(x.rows()) - span;
  if (T_out < 1) throw Error("utterance too short for layer context");
  const int d = static_cast<int>(x.cols());
  Mat out(T_out, d * offsets.size());
  for (size_t i = 0; i < offsets.size(); ++i) {
    const int shift = offsets[i] - offsets.front();
    out.middleCols(static_cast<int>(i) * d, d) = x.middleRows(shift, T_out);
  }
  return out;
}

/// Mean (d) concatenated with std (d); population variance with floor
/// ε_v = 1e-8 applied inside the square root.
template <typename Derived>
auto stats_pool(const Eigen::MatrixBase<Derived>& frames) {
  using S = typename Derived::Scalar;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  const auto T = frames.rows();
  if (T < 1) throw Error("stats_pool: no frames");
  const int d = static_cast<int>(frames.cols());
  Vec out(2 * d);
  for (int c = 0; c < d; ++c) {
    const S mean = frames.col(c).mean();
    const S var = (frames.col(c).array() - mean).square().sum() / static_cast<S>(T);
    out[c] = mean;
    out[d + c] = std::sqrt(std::max(var, static_cast<S>(kVarianceFloor)));
  }
  return out;
}

/// Everything the backward pass needs from one utterance's forward pass.
template <typename S>
struct ForwardCache {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  std::vector<Mat> spliced;  // per layer, input after splicing
  std::vector<Mat> pre;      // per layer, pre-activation (T' x out_dim)
  Vec pooled;                // 2*hidden
  Vec embedding;             // emb_dim, pre-activation output of segment layer
};

template <typename S>
ForwardCache<S> tdnn_forward(const TdnnParamsT<S>& p,
                             const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& feats) {
  if (static_cast<int>(feats.rows()) < p.topo.min_frames())
    throw Error("utterance shorter than receptive field (" +
                std::to_string(p.topo.min_frames()) + " frames)");
  ForwardCache<S> cache;
  using Mat = typename TdnnParamsT<S>::Mat;
  Mat act = feats;
  for (size_t l = 0; l < p.topo.layers.size(); ++l) {
    cache.spliced.push_back(splice(act, p.topo.layers[l].offsets));
    cache.pre.push_back((cache.spliced[l] * p.W[l].transpose()).rowwise() +
                        p.b[l].transpose());
    act = cache.pre[l].cwiseMax(S(0));
  }
  cache.pooled = stats_pool(act);
  cache.embedding = p.W_seg * cache.pooled + p.b_seg;
  return cache;
}

using Embedding = Eigen::VectorXf;

/// Utterance embedding: segment-layer output, no nonlinearity after it.
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> embed_utterance(
    const TdnnParamsT<S>& p, const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& feats) {
  return tdnn_forward(p, feats).embedding;
}

inline Embedding embed(const ModelParams& p, const FeatureMatrix& feats) {
  return embed_utterance(p, Eigen::MatrixXd(feats.frames.cast<double>()))
      .cast<float>();
}

template <typename DA, typename DB>
double cosine_score(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const double na = a.template cast<double>().norm();
  const double nb = b.template cast<double>().norm();
  if (na == 0.0 || nb == 0.0) throw Error("cosine_score: zero-norm embedding");
  return a.template cast<double>().dot(b.template cast<double>()) / (na * nb);
}

/// Cosine logits: both the embedding and each classifier row L2-normalized.
inline Eigen::VectorXd classify_logits(const ModelParams& p,
                                       const Eigen::VectorXd& emb) {
  const double ne = emb.norm();
  if (ne == 0.0) throw Error("classify_logits: zero-norm embedding");
  Eigen::VectorXd logits(p.W_cls.rows());
  for (Eigen::Index j = 0; j < p.W_cls.rows(); ++j) {
    const double nw = p.W_cls.row(j).norm();
    if (nw == 0.0) throw Error("classify_logits: zero-norm classifier row");
    logits[j] = p.W_cls.row(j).dot(emb) / (nw * ne);
  }
  return logits;
}

}  // namespace sparsevox
