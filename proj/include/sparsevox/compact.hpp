// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <numeric>
#include <vector>

#include "sparsevox/groups.hpp"
#include "sparsevox/model.hpp"

namespace sparsevox {

/// Physically compacted model.
///
/// Filter granularity removes dead rows and the input columns they feed in
/// the next layer. A dead filter still emits the constant ReLU(bias), so that
/// constant is folded into the next layer's biases; the compact model's
/// embedding therefore matches the masked dense model, not just approximates
/// its structure.
///
/// Chunk granularity keeps the dense layout (zeroed weights in place); the
/// packed module is what exploits those holes.
struct CompactModel {
  ModelParams params;
  Granularity granularity = Granularity::Filter;
  SparsityMask mask;                    // the mask this model was built from
  std::vector<std::vector<int>> kept;   // per layer 1..4: surviving row indices
};

inline CompactModel compact(const ModelParams& p, const GroupPartition& part,
                            const SparsityMask& mask) {
  check_mask(part, mask);
  CompactModel out;
  out.granularity = part.granularity;
  out.mask = mask;

  if (part.granularity != Granularity::Filter) {
    out.params = apply_mask(p, part, mask);
    for (int l = 0; l < kSparseLayers; ++l) {
      out.kept.emplace_back(p.topo.layers[l].out_dim);
      std::iota(out.kept[l].begin(), out.kept[l].end(), 0);
    }
    return out;
  }

  // Filter masks have one group per row, in row order.
  std::vector<std::vector<int>> kept(p.topo.layers.size());
  for (size_t l = 0; l < p.topo.layers.size(); ++l) {
    const int rows = p.topo.layers[l].out_dim;
    if (l < kSparseLayers) {
      for (int r = 0; r < rows; ++r)
        if (!mask.zeroed[mask.layer_begin[l] + r]) kept[l].push_back(r);
      if (kept[l].empty())
        throw Error(p.topo.layers[l].name +
                    " lost every filter; model is disconnected");
    } else {
      kept[l].resize(rows);
      std::iota(kept[l].begin(), kept[l].end(), 0);
    }
  }

  ModelParams q;
  q.topo = p.topo;
  std::vector<int> alive_in(p.topo.feat_dim);
  std::iota(alive_in.begin(), alive_in.end(), 0);
  int prev_layer = -1;
  for (size_t l = 0; l < p.topo.layers.size(); ++l) {
    const LayerSpec& spec = p.topo.layers[l];
    const int n_off = static_cast<int>(spec.offsets.size());
    const int out_rows = static_cast<int>(kept[l].size());
    const int in_cols = static_cast<int>(alive_in.size());

    Eigen::MatrixXd W(out_rows, n_off * in_cols);
    Eigen::VectorXd b(out_rows);
    for (int r = 0; r < out_rows; ++r) {
      const int orig_r = kept[l][r];
      b[r] = p.b[l][orig_r];
      for (int i = 0; i < n_off; ++i)
        for (int c = 0; c < in_cols; ++c)
          W(r, i * in_cols + c) = p.W[l](orig_r, i * spec.in_dim + alive_in[c]);
    }

    // fold constant activations of the previous layer's dead filters into b
    if (prev_layer >= 0) {
      const LayerSpec& prev = p.topo.layers[prev_layer];
      std::vector<uint8_t> is_kept(prev.out_dim, 0);
      for (int ch : kept[prev_layer]) is_kept[ch] = 1;
      for (int ch = 0; ch < prev.out_dim; ++ch) {
        if (is_kept[ch]) continue;
        const double act = std::max(p.b[prev_layer][ch], 0.0);
        if (act == 0.0) continue;
        for (int r = 0; r < out_rows; ++r) {
          double sum = 0.0;
          for (int i = 0; i < n_off; ++i)
            sum += p.W[l](kept[l][r], i * spec.in_dim + ch);
          b[r] += act * sum;
        }
      }
    }

    q.W.push_back(std::move(W));
    q.b.push_back(std::move(b));
    q.topo.layers[l].in_dim = in_cols;
    q.topo.layers[l].out_dim = out_rows;
    alive_in = kept[l];
    prev_layer = static_cast<int>(l);
  }

  q.W_seg = p.W_seg;   // layer 5 never loses rows, pooled dim is unchanged
  q.b_seg = p.b_seg;
  q.W_cls = p.W_cls;
  q.topo.hidden = q.topo.layers.back().out_dim;
  out.params = std::move(q);
  out.kept.assign(kept.begin(), kept.begin() + kSparseLayers);
  return out;
}

/// Total tensor size of a model (embedding path), for cross-checking the
/// structural count_nonzero_params.
inline int64_t dense_size(const ModelParams& p) {
  int64_t n = 0;
  for (const auto& W : p.W) n += W.size();
  for (const auto& b : p.b) n += b.size();
  n += p.W_seg.size() + p.b_seg.size();
  return n;
}

}  // namespace sparsevox
