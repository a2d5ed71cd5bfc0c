// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "sparsevox/common.hpp"
#include "sparsevox/model.hpp"

namespace sparsevox {

/// Structural sparsity granularity. Chunk widths match the packed format's
/// 16-byte fetch: 8 int16 or 16 int8 elements.
enum class Granularity : uint8_t { Filter = 0, Chunk8 = 1, Chunk16 = 2 };

inline int chunk_width(Granularity g) {
  switch (g) {
    case Granularity::Filter: return 0;
    case Granularity::Chunk8: return 8;
    case Granularity::Chunk16: return 16;
  }
  throw Error("bad granularity");
}

inline std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::Filter: return "filter";
    case Granularity::Chunk8: return "chunk8";
    case Granularity::Chunk16: return "chunk16";
  }
  throw Error("bad granularity");
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "filter") return Granularity::Filter;
  if (s == "chunk8") return Granularity::Chunk8;
  if (s == "chunk16") return Granularity::Chunk16;
  throw Error("unknown granularity '" + s + "' (filter|chunk8|chunk16)");
}

/// Number of frame-level layers subject to sparsity (layers 1-4; layer 5 and
/// everything after it stay dense).
constexpr int kSparseLayers = 4;

/// One group: a contiguous column run within one row of W[layer].
/// Filter groups span the whole row.
struct Group {
  int layer = 0;  // 0-based index into ModelParams::W, < kSparseLayers
  int row = 0;
  int col = 0;
  int len = 0;
};

struct GroupPartition {
  Granularity granularity = Granularity::Filter;
  std::vector<Group> groups;                    // layer-major, row-major, col-major
  std::array<int, kSparseLayers> layer_begin{};  // index of each layer's first group
  std::array<int, kSparseLayers> layer_count{};

  int size() const { return static_cast<int>(groups.size()); }
};

inline GroupPartition build_groups(const Topology& topo, Granularity g) {
  if (topo.layers.size() < static_cast<size_t>(kSparseLayers))
    throw Error("topology has fewer than 4 frame layers");
  GroupPartition part;
  part.granularity = g;
  const int c = chunk_width(g);
  for (int l = 0; l < kSparseLayers; ++l) {
    part.layer_begin[l] = part.size();
    const int rows = topo.layers[l].out_dim;
    const int width = topo.layers[l].spliced_dim();
    for (int r = 0; r < rows; ++r) {
      if (g == Granularity::Filter) {
        part.groups.push_back({l, r, 0, width});
      } else {
        // full chunks, then an unpadded tail of width % c when c doesn't divide
        for (int col = 0; col < width; col += c)
          part.groups.push_back({l, r, col, std::min(c, width - col)});
      }
    }
    part.layer_count[l] = part.size() - part.layer_begin[l];
  }
  return part;
}

inline Eigen::VectorXd group_norms(const ModelParams& p, const GroupPartition& part) {
  Eigen::VectorXd norms(part.size());
  for (int k = 0; k < part.size(); ++k) {
    const Group& g = part.groups[k];
    if (g.layer >= static_cast<int>(p.W.size()) || g.row >= p.W[g.layer].rows() ||
        g.col + g.len > p.W[g.layer].cols())
      throw Error("group partition does not match model shape");
    norms[k] = p.W[g.layer].row(g.row).segment(g.col, g.len).norm();
  }
  return norms;
}

/// Per-group zero flags (1 = group zeroed), aligned with a GroupPartition.
struct SparsityMask {
  Granularity granularity = Granularity::Filter;
  std::vector<uint8_t> zeroed;  // one flag per group
  std::array<int, kSparseLayers> layer_begin{};
  std::array<int, kSparseLayers> layer_count{};

  int size() const { return static_cast<int>(zeroed.size()); }
  int zero_count(int layer) const {
    int n = 0;
    for (int k = 0; k < layer_count[layer]; ++k) n += zeroed[layer_begin[layer] + k];
    return n;
  }
  int zero_count() const {
    int n = 0;
    for (uint8_t z : zeroed) n += z;
    return n;
  }
};

inline SparsityMask empty_mask(const GroupPartition& part) {
  SparsityMask m;
  m.granularity = part.granularity;
  m.zeroed.assign(part.groups.size(), 0);
  m.layer_begin = part.layer_begin;
  m.layer_count = part.layer_count;
  return m;
}

/// Zero a group iff its L2 norm is strictly below τ_abs * sqrt(group size).
/// The sqrt scaling puts 8-wide chunks and 200-wide filters on equal footing.
inline SparsityMask threshold_mask(const GroupPartition& part,
                                   const Eigen::VectorXd& norms, double tau_abs) {
  if (norms.size() != part.size()) throw Error("norms/partition size mismatch");
  if (tau_abs < 0) throw Error("threshold must be >= 0");
  SparsityMask m = empty_mask(part);
  for (int k = 0; k < part.size(); ++k)
    m.zeroed[k] = norms[k] < tau_abs * std::sqrt(static_cast<double>(part.groups[k].len));
  return m;
}

inline void check_mask(const GroupPartition& part, const SparsityMask& m) {
  if (m.granularity != part.granularity || m.size() != part.size() ||
      m.layer_count != part.layer_count)
    throw Error("mask does not match group partition");
}

/// Copy of the model with every zeroed group's weights set to exactly 0.
/// Biases are untouched (they are not group members).
inline ModelParams apply_mask(const ModelParams& p, const GroupPartition& part,
                              const SparsityMask& m) {
  check_mask(part, m);
  ModelParams out = p;
  for (int k = 0; k < part.size(); ++k) {
    if (!m.zeroed[k]) continue;
    const Group& g = part.groups[k];
    out.W[g.layer].row(g.row).segment(g.col, g.len).setZero();
  }
  return out;
}

/// Structural non-zero parameter count of the embedding path (layers 1-5 +
/// segment, weights and biases; the softmax head is excluded).
///
/// Filter granularity with propagation removes a dead filter's row (weights
/// + bias) and the columns it feeds in the next layer. Chunk granularity
/// removes exactly the masked weights, nothing else.
inline int64_t count_nonzero_params(const Topology& topo, const GroupPartition& part,
                                    const SparsityMask& m,
                                    bool propagate_filters = true) {
  check_mask(part, m);
  if (part.granularity == Granularity::Filter && propagate_filters) {
    // product form: exact even when consecutive layers both lose filters
    std::array<int, kSparseLayers> dead{};
    for (int l = 0; l < kSparseLayers; ++l) dead[l] = m.zero_count(l);
    int64_t n = 0;
    int alive_in = topo.feat_dim;
    for (size_t l = 0; l < topo.layers.size(); ++l) {
      const auto& spec = topo.layers[l];
      const int alive_out =
          l < kSparseLayers ? spec.out_dim - dead[l] : spec.out_dim;
      n += static_cast<int64_t>(alive_out) * spec.offsets.size() * alive_in +
           alive_out;
      alive_in = alive_out;
    }
    n += static_cast<int64_t>(topo.emb_dim) * (2 * topo.layers.back().out_dim) +
         topo.emb_dim;
    return n;
  }
  int64_t n = count_params(topo);
  for (int k = 0; k < part.size(); ++k)
    if (m.zeroed[k]) n -= part.groups[k].len;
  return n;
}

struct LayerSparsity {
  std::string layer;
  int groups = 0;
  int zero_groups = 0;
  double fraction = 0.0;
};

struct SparsityReport {
  Granularity granularity = Granularity::Filter;
  std::array<LayerSparsity, kSparseLayers> layers;
  int64_t nonzero_params = 0;

  /// zero groups / groups over layers 1-4 combined.
  double total_fraction() const {
    int g = 0, z = 0;
    for (const auto& l : layers) {
      g += l.groups;
      z += l.zero_groups;
    }
    return g == 0 ? 0.0 : static_cast<double>(z) / g;
  }
};

inline SparsityReport sparsity_report(const Topology& topo, const GroupPartition& part,
                                      const SparsityMask& m) {
  check_mask(part, m);
  SparsityReport rep;
  rep.granularity = part.granularity;
  for (int l = 0; l < kSparseLayers; ++l) {
    rep.layers[l].layer = topo.layers[l].name;
    rep.layers[l].groups = part.layer_count[l];
    rep.layers[l].zero_groups = m.zero_count(l);
    rep.layers[l].fraction =
        static_cast<double>(rep.layers[l].zero_groups) / part.layer_count[l];
  }
  rep.nonzero_params = count_nonzero_params(
      topo, part, m, /*propagate_filters=*/part.granularity == Granularity::Filter);
  return rep;
}

// ---------------------------------------------------------------------------
// Mask sidecar file: {magic "MASK", u8 granularity, per layer: u32 group
// count + bitmap (LSB-first, 1 = zeroed)}.

inline std::vector<uint8_t> serialize_mask(const SparsityMask& m) {
  ByteWriter w;
  w.magic("MASK");
  w.u8(static_cast<uint8_t>(m.granularity));
  for (int l = 0; l < kSparseLayers; ++l) {
    const int n = m.layer_count[l];
    w.u32(static_cast<uint32_t>(n));
    uint8_t byte = 0;
    for (int k = 0; k < n; ++k) {
      if (m.zeroed[m.layer_begin[l] + k]) byte |= uint8_t(1u << (k % 8));
      if (k % 8 == 7 || k == n - 1) {
        w.u8(byte);
        byte = 0;
      }
    }
  }
  return w.data();
}

inline SparsityMask deserialize_mask(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.magic("MASK", "mask");
  const uint8_t g = r.u8();
  if (g > 2) throw FormatError("mask file has unknown granularity code");
  SparsityMask m;
  m.granularity = static_cast<Granularity>(g);
  for (int l = 0; l < kSparseLayers; ++l) {
    const uint32_t n = r.u32();
    m.layer_begin[l] = m.size();
    m.layer_count[l] = static_cast<int>(n);
    uint8_t byte = 0;
    for (uint32_t k = 0; k < n; ++k) {
      if (k % 8 == 0) byte = r.u8();
      m.zeroed.push_back((byte >> (k % 8)) & 1u);
    }
  }
  if (!r.eof()) throw FormatError("mask file has trailing bytes");
  return m;
}

inline void write_mask_file(const std::filesystem::path& path, const SparsityMask& m) {
  write_file(path, serialize_mask(m));
}

inline SparsityMask read_mask_file(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return deserialize_mask(bytes);
}

}  // namespace sparsevox
