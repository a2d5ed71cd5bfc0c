// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "sparsevox/common.hpp"
#include "sparsevox/model.hpp"

namespace sparsevox {

// Checkpoint: {magic "TDNN", version u32, tensor count u32}, then per tensor
// {name (u32 length + bytes), u32 rows, u32 cols, row-major f64}.

constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(ByteWriter& w, const std::string& name,
                       const Eigen::MatrixXd& m) {
  w.str(name);
  w.u32(static_cast<uint32_t>(m.rows()));
  w.u32(static_cast<uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
}

}  // namespace detail

inline std::vector<uint8_t> serialize_model(const ModelParams& p) {
  ByteWriter w;
  w.magic("TDNN");
  w.u32(kCheckpointVersion);
  const uint32_t n_tensors = static_cast<uint32_t>(2 * p.W.size()) + 3;
  w.u32(n_tensors);
  for (size_t l = 0; l < p.W.size(); ++l) {
    const auto& name = p.topo.layers[l].name;
    detail::put_tensor(w, name + ".W", p.W[l]);
    detail::put_tensor(w, name + ".b", p.b[l]);
  }
  detail::put_tensor(w, "segment.W", p.W_seg);
  detail::put_tensor(w, "segment.b", p.b_seg);
  detail::put_tensor(w, "softmax.W", p.W_cls);
  return w.data();
}

/// Rebuilds a model from a checkpoint. The layer contexts are architectural
/// constants; the width (hidden/embedding dims) and class count are inferred
/// from tensor shapes and cross-checked.
inline ModelParams deserialize_model(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.magic("TDNN", "checkpoint");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const uint32_t n_tensors = r.u32();

  std::map<std::string, Eigen::MatrixXd> tensors;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    if (static_cast<uint64_t>(rows) * cols * 8 > r.remaining())
      throw FormatError("checkpoint tensor " + name + " overruns file");
    Eigen::MatrixXd m(rows, cols);
    for (uint32_t rr = 0; rr < rows; ++rr)
      for (uint32_t cc = 0; cc < cols; ++cc) m(rr, cc) = r.f64();
    if (!tensors.emplace(std::move(name), std::move(m)).second)
      throw FormatError("checkpoint has duplicate tensor names");
  }
  if (!r.eof()) throw FormatError("checkpoint has trailing bytes");

  auto get = [&](const std::string& name) -> Eigen::MatrixXd& {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw FormatError("checkpoint missing tensor " + name);
    return it->second;
  };

  Eigen::MatrixXd& w1 = get("layer1.W");
  if (w1.cols() % 5 != 0 || w1.rows() < 1)
    throw FormatError("checkpoint layer1.W has impossible shape");
  const int hidden = static_cast<int>(w1.rows());
  const int feat_dim = static_cast<int>(w1.cols()) / 5;
  Eigen::MatrixXd& wseg = get("segment.W");
  const int emb = static_cast<int>(wseg.rows());
  Eigen::MatrixXd& wcls = get("softmax.W");
  const int n_classes = static_cast<int>(wcls.rows());

  Topology topo;
  topo.feat_dim = feat_dim;
  topo.hidden = hidden;
  topo.emb_dim = emb;
  topo.n_classes = n_classes;
  topo.layers = {
      {"layer1", {-2, -1, 0, 1, 2}, feat_dim, hidden},
      {"layer2", {-2, 0, 2}, hidden, hidden},
      {"layer3", {-2, 0, 2}, hidden, hidden},
      {"layer4", {0}, hidden, hidden},
      {"layer5", {0}, hidden, hidden},
  };

  ModelParams p;
  p.topo = topo;
  for (const auto& l : topo.layers) {
    Eigen::MatrixXd& W = get(l.name + ".W");
    Eigen::MatrixXd& b = get(l.name + ".b");
    if (W.rows() != l.out_dim || W.cols() != l.spliced_dim())
      throw FormatError("checkpoint " + l.name + ".W shape mismatch");
    if (b.rows() != l.out_dim || b.cols() != 1)
      throw FormatError("checkpoint " + l.name + ".b shape mismatch");
    p.W.push_back(std::move(W));
    p.b.push_back(Eigen::VectorXd(b.col(0)));
  }
  if (wseg.cols() != 2 * hidden)
    throw FormatError("checkpoint segment.W shape mismatch");
  Eigen::MatrixXd& bseg = get("segment.b");
  if (bseg.rows() != emb || bseg.cols() != 1)
    throw FormatError("checkpoint segment.b shape mismatch");
  if (n_classes > 0 && wcls.cols() != emb)
    throw FormatError("checkpoint softmax.W shape mismatch");
  p.W_seg = std::move(wseg);
  p.b_seg = bseg.col(0);
  p.W_cls = std::move(wcls);

  for (const auto& W : p.W)
    if (!W.allFinite()) throw FormatError("checkpoint contains non-finite weights");
  if (!p.W_seg.allFinite() || !p.b_seg.allFinite() || !p.W_cls.allFinite())
    throw FormatError("checkpoint contains non-finite weights");
  return p;
}

inline void write_model_file(const std::filesystem::path& path, const ModelParams& p) {
  write_file(path, serialize_model(p));
}

inline ModelParams read_model_file(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return deserialize_model(bytes);
}

}  // namespace sparsevox
