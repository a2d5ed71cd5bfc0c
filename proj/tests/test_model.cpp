// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "sparsevox/checkpoint.hpp"
#include "sparsevox/model.hpp"

using namespace sparsevox;

namespace {

Eigen::MatrixXd random_frames(int T, int d, uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(T, d);
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < d; ++c) m(t, c) = rng.gauss();
  return m;
}

TEST(Splice, SingleOffsetIsIdentity) {
  auto x = random_frames(7, 3, 1);
  auto y = splice(x, {0});
  EXPECT_TRUE(y == x);
}

TEST(Splice, FullContextShape) {
  auto x = random_frames(10, 40, 2);
  auto y = splice(x, {-2, -1, 0, 1, 2});
  ASSERT_EQ(y.rows(), 6);
  ASSERT_EQ(y.cols(), 200);
  // row t' holds rows t'+0 .. t'+4 of the input, offset-ordered
  for (int i = 0; i < 5; ++i)
    EXPECT_TRUE(y.block(2, 40 * i, 1, 40) == x.row(2 + i));
}

TEST(Splice, BoundaryExactlyOneFrame) {
  auto x = random_frames(5, 2, 3);
  auto y = splice(x, {-2, 0, 2});
  ASSERT_EQ(y.rows(), 1);
  ASSERT_EQ(y.cols(), 6);
  EXPECT_EQ(y(0, 0), x(0, 0));
  EXPECT_EQ(y(0, 2), x(2, 0));
  EXPECT_EQ(y(0, 4), x(4, 0));
}

TEST(Splice, RejectsTooShort) {
  auto x = random_frames(4, 2, 4);
  EXPECT_THROW(splice(x, {-2, 0, 2}), Error);
}

TEST(Topology, TableShapesAndReceptiveField) {
  auto t = make_topology(1.0, 7323);
  ASSERT_EQ(t.layers.size(), 5u);
  EXPECT_EQ(t.layers[0].spliced_dim(), 200);
  EXPECT_EQ(t.layers[0].out_dim, 512);
  EXPECT_EQ(t.layers[1].spliced_dim(), 1536);
  EXPECT_EQ(t.layers[2].spliced_dim(), 1536);
  EXPECT_EQ(t.layers[3].spliced_dim(), 512);
  EXPECT_EQ(t.layers[4].spliced_dim(), 512);
  EXPECT_EQ(t.pooled_dim(), 1024);
  EXPECT_EQ(t.emb_dim, 256);
  EXPECT_EQ(t.receptive_field(), 12);
  EXPECT_EQ(t.min_frames(), 13);

  auto small = make_topology(0.125);
  EXPECT_EQ(small.hidden, 64);
  EXPECT_EQ(small.emb_dim, 32);
  EXPECT_EQ(small.receptive_field(), 12);
}

TEST(Topology, ParamCountMatchesShapeSum) {
  // 200*512 + 2*(1536*512) + 2*(512*512) + 1024*256 weights, 5*512+256 biases
  EXPECT_EQ(count_params(make_topology(1.0)), 2464512);
}

TEST(Forward, MinimumUtteranceGivesOneFrame) {
  auto topo = make_topology(1.0, 4);
  auto p = random_params(topo, 5);
  auto feats = random_frames(13, 40, 6);
  auto cache = tdnn_forward(p, feats);
  EXPECT_EQ(cache.pre.back().rows(), 1);
  EXPECT_EQ(cache.pre.back().cols(), 512);
  EXPECT_EQ(cache.embedding.size(), 256);
  EXPECT_THROW(tdnn_forward(p, random_frames(12, 40, 6)), Error);
}

TEST(Forward, ZeroParamsGiveBiasEmbedding) {
  auto topo = make_topology(0.25, 3);
  auto p = zero_params<double>(topo);
  p.b_seg.setConstant(1.5);
  auto cache = tdnn_forward(p, random_frames(20, 40, 7));
  for (const auto& pre : cache.pre)
    EXPECT_NEAR(pre.cwiseAbs().maxCoeff(), 0.0, 0.0);
  EXPECT_TRUE(cache.embedding.isApproxToConstant(1.5, 1e-15));
}

TEST(Forward, DoublingWeightsDoublesPreActivations) {
  auto topo = make_topology(0.125, 2);
  auto p = random_params(topo, 8);
  auto feats = random_frames(30, 40, 9);
  auto base = tdnn_forward(p, feats);
  auto doubled = p;
  doubled.W[0] *= 2.0;
  auto out = tdnn_forward(doubled, feats);
  EXPECT_LT((out.pre[0] - 2.0 * base.pre[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(StatsPool, SingleFrameStdIsFloor) {
  Eigen::MatrixXd one(1, 4);
  one << 1.0, -2.0, 0.0, 7.0;
  auto v = stats_pool(one);
  ASSERT_EQ(v.size(), 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(v[i], one(0, i));
    EXPECT_DOUBLE_EQ(v[4 + i], 1e-4);  // sqrt(1e-8)
  }
}

TEST(StatsPool, PopulationVarianceConvention) {
  Eigen::MatrixXd frames(2, 1);
  frames << 0.0, 2.0;
  auto v = stats_pool(frames);
  EXPECT_DOUBLE_EQ(v[0], 1.0);
  EXPECT_DOUBLE_EQ(v[1], 1.0);  // population variance, not sample (which would be sqrt(2))
}

TEST(StatsPool, PermutingFramesChangesNothing) {
  auto frames = random_frames(37, 16, 11);
  auto v1 = stats_pool(frames);
  std::vector<int> perm(37);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937(99));
  Eigen::MatrixXd shuffled(37, 16);
  for (int i = 0; i < 37; ++i) shuffled.row(i) = frames.row(perm[i]);
  auto v2 = stats_pool(shuffled);
  EXPECT_LT((v1 - v2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Embed, ConstantInputSelfConcatenationInvariant) {
  auto topo = make_topology(0.125, 2);
  auto p = random_params(topo, 13);
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(20, 40, 0.7);
  Eigen::MatrixXd xx(40, 40);
  xx << x, x;
  auto e1 = embed_utterance(p, x);
  auto e2 = embed_utterance(p, xx);
  EXPECT_LT((e1 - e2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Embed, Float32PathTracksFloat64) {
  auto topo = make_topology(0.125, 2);
  auto p = random_params(topo, 17);
  auto feats = random_frames(40, 40, 18);
  auto e64 = embed_utterance(p, feats);
  auto p32 = p.cast<float>();
  Eigen::MatrixXf f32 = feats.cast<float>();
  auto e32 = embed_utterance(p32, f32);
  EXPECT_LT((e64.cast<float>() - e32).cwiseAbs().maxCoeff(), 1e-3f);
}

TEST(Cosine, AnalyticCases) {
  Eigen::VectorXd a(3), b(3);
  a << 1, 0, 0;
  b << 1, 1, 0;
  EXPECT_DOUBLE_EQ(cosine_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_score(a, Eigen::VectorXd(-a)), -1.0);
  EXPECT_NEAR(cosine_score(a, b), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(cosine_score(Eigen::VectorXd(3.7 * a), b), cosine_score(a, b), 1e-15);
  EXPECT_THROW(cosine_score(Eigen::VectorXd::Zero(3), b), Error);
}

TEST(ClassifyLogits, NormalizedCosines) {
  auto topo = make_topology(0.125, 3);
  auto p = zero_params<double>(topo);
  Eigen::VectorXd emb = Eigen::VectorXd::Zero(topo.emb_dim);
  emb[0] = 2.0;
  p.W_cls.row(0) = 0.5 * emb.transpose();   // parallel
  p.W_cls(1, 1) = 4.0;                      // orthogonal
  p.W_cls(2, 0) = 1.0;
  p.W_cls(2, 2) = 1.0;
  auto logits = classify_logits(p, emb);
  EXPECT_NEAR(logits[0], 1.0, 1e-15);
  EXPECT_NEAR(logits[1], 0.0, 1e-15);
  EXPECT_NEAR(logits[2], 1.0 / std::sqrt(2.0), 1e-15);

  auto pr = random_params(make_topology(0.125, 10), 21);
  Eigen::VectorXd re = Eigen::VectorXd::Random(topo.emb_dim);
  auto rl = classify_logits(pr, re);
  EXPECT_LE(rl.maxCoeff(), 1.0 + 1e-12);
  EXPECT_GE(rl.minCoeff(), -1.0 - 1e-12);

  p.W_cls.row(1).setZero();
  EXPECT_THROW(classify_logits(p, emb), Error);
  EXPECT_THROW(classify_logits(pr, Eigen::VectorXd::Zero(topo.emb_dim)), Error);
}

// --------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsExact) {
  auto p = random_params(make_topology(0.25, 7), 31);
  auto bytes = serialize_model(p);
  auto q = deserialize_model(bytes);
  ASSERT_EQ(q.topo.hidden, p.topo.hidden);
  ASSERT_EQ(q.topo.emb_dim, p.topo.emb_dim);
  ASSERT_EQ(q.topo.n_classes, 7);
  for (size_t l = 0; l < p.W.size(); ++l) {
    EXPECT_TRUE(q.W[l] == p.W[l]);
    EXPECT_TRUE(q.b[l] == p.b[l]);
  }
  EXPECT_TRUE(q.W_seg == p.W_seg);
  EXPECT_TRUE(q.b_seg == p.b_seg);
  EXPECT_TRUE(q.W_cls == p.W_cls);
}

TEST(Checkpoint, RejectsDamage) {
  auto p = random_params(make_topology(0.125, 2), 32);
  auto good = serialize_model(p);

  auto bad_magic = good;
  bad_magic[1] = 'X';
  EXPECT_THROW(deserialize_model(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_model(bad_version), FormatError);

  auto truncated = good;
  truncated.resize(truncated.size() / 2);
  EXPECT_THROW(deserialize_model(truncated), FormatError);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_model(trailing), FormatError);

  auto nan_model = p;
  nan_model.W[2](1, 1) = std::nan("");
  EXPECT_THROW(deserialize_model(serialize_model(nan_model)), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  auto p = random_params(make_topology(0.125, 3), 33);
  auto path = std::filesystem::temp_directory_path() / "sparsevox_ckpt_test.tdnn";
  write_model_file(path, p);
  auto q = read_model_file(path);
  EXPECT_TRUE(q.W[0] == p.W[0]);
  std::filesystem::remove(path);
}

}  // namespace
