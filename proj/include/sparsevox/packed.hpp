// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0
//
// Chunk-packed quantized model format ("SPKP") and the chunk-skipping
// inference kernel.
//
// Weights are quantized per row (symmetric, round-half-away-from-zero) and
// stored in 16-byte chunks: 8 int16 elements or 16 int8 elements. In layers
// 1-4 a chunk whose covered weights are all exactly zero is dropped from the
// payload and its bitmap bit cleared; the kernel never fetches it. Layer 5,
// and the segment layer stay dense (quantized, all chunks present). Biases
// and activations are 32-bit floats.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <vector>

#include "sparsevox/compact.hpp"
#include "sparsevox/features.hpp"
#include "sparsevox/groups.hpp"
#include "sparsevox/model.hpp"

namespace sparsevox {

enum class QuantScheme : uint8_t { Int16Chunk8 = 0, Int8Chunk16 = 1 };

inline int scheme_chunk_width(QuantScheme s) {
  return s == QuantScheme::Int16Chunk8 ? 8 : 16;
}
inline int scheme_qmax(QuantScheme s) {
  return s == QuantScheme::Int16Chunk8 ? 32767 : 127;
}
inline std::string to_string(QuantScheme s) {
  return s == QuantScheme::Int16Chunk8 ? "int16c8" : "int8c16";
}
inline QuantScheme parse_scheme(const std::string& s) {
  if (s == "int16c8") return QuantScheme::Int16Chunk8;
  if (s == "int8c16") return QuantScheme::Int8Chunk16;
  throw Error("unknown quantization scheme '" + s + "' (int16c8|int8c16)");
}

struct PackedLayer {
  int in_dim = 0;    // channels before splicing
  int out_dim = 0;   // rows
  int width = 0;     // spliced width = in_dim * |offsets|
  std::vector<int> offsets;
  bool skippable = false;  // carries a bitmap; absent chunks are never fetched

  std::vector<float> scale;  // per row; 0 means the row is all zeros
  std::vector<float> bias;
  std::vector<uint8_t> bitmap;        // per row, byte-aligned, LSB-first
  std::vector<int64_t> payload_start; // per row, element offset into q16/q8
  std::vector<int16_t> q16;
  std::vector<int8_t> q8;

  int n_chunks(int chunk_w) const { return (width + chunk_w - 1) / chunk_w; }
  int bitmap_row_bytes(int chunk_w) const { return (n_chunks(chunk_w) + 7) / 8; }
  bool alive(int row, int chunk, int chunk_w) const {
    return (bitmap[static_cast<size_t>(row) * bitmap_row_bytes(chunk_w) + chunk / 8] >>
            (chunk % 8)) &
           1u;
  }
};

struct PackedModel {
  QuantScheme scheme = QuantScheme::Int16Chunk8;
  Granularity granularity = Granularity::Filter;
  int feat_dim = 0;
  int emb_dim = 0;
  std::vector<PackedLayer> layers;  // the 5 frame-level layers
  PackedLayer segment;              // width = 2 * layer5.out_dim

  int chunk_w() const { return scheme_chunk_width(scheme); }
  int min_frames() const {
    int rf = 0;
    for (const auto& l : layers) rf += l.offsets.back() - l.offsets.front();
    return rf + 1;
  }
};

constexpr uint32_t kPackedVersion = 1;

// ---------------------------------------------------------------------------
// Quantization.

namespace detail {

/// Quantize one affine layer. A skippable layer drops all-zero chunks unless
/// dense_layout forces every chunk into the payload (reference layout for
/// benchmarking the same weights without skipping).
inline PackedLayer pack_layer(const Eigen::MatrixXd& W, const Eigen::VectorXd& b,
                              const std::vector<int>& offsets, int in_dim,
                              bool skippable, QuantScheme scheme,
                              bool dense_layout) {
  PackedLayer L;
  L.in_dim = in_dim;
  L.out_dim = static_cast<int>(W.rows());
  L.width = static_cast<int>(W.cols());
  L.offsets = offsets;
  L.skippable = skippable;
  const int cw = scheme_chunk_width(scheme);
  const int qmax = scheme_qmax(scheme);
  const int chunks = L.n_chunks(cw);
  const int row_bytes = L.bitmap_row_bytes(cw);

  if (!W.allFinite() || !b.allFinite())
    throw Error("cannot quantize non-finite weights");

  L.scale.resize(L.out_dim);
  L.bias.resize(L.out_dim);
  L.bitmap.assign(static_cast<size_t>(L.out_dim) * row_bytes, 0);
  L.payload_start.resize(L.out_dim);

  for (int r = 0; r < L.out_dim; ++r) {
    L.bias[r] = static_cast<float>(b[r]);
    const double wmax = W.row(r).cwiseAbs().maxCoeff();
    const float s = wmax == 0.0 ? 0.0f : static_cast<float>(wmax / qmax);
    L.scale[r] = s;
    L.payload_start[r] =
        static_cast<int64_t>(scheme == QuantScheme::Int16Chunk8 ? L.q16.size()
                                                                : L.q8.size());
    for (int j = 0; j < chunks; ++j) {
      const int col0 = j * cw;
      const int w = std::min(cw, L.width - col0);
      bool all_zero = true;
      for (int u = 0; u < w; ++u)
        if (W(r, col0 + u) != 0.0) all_zero = false;
      const bool keep = dense_layout || !skippable || !all_zero;
      if (!keep) continue;
      L.bitmap[static_cast<size_t>(r) * row_bytes + j / 8] |=
          static_cast<uint8_t>(1u << (j % 8));
      for (int u = 0; u < cw; ++u) {
        long q = 0;
        if (u < w && s != 0.0f) {
          q = std::lround(W(r, col0 + u) / static_cast<double>(s));
          q = std::clamp<long>(q, -qmax, qmax);
        }
        if (scheme == QuantScheme::Int16Chunk8)
          L.q16.push_back(static_cast<int16_t>(q));
        else
          L.q8.push_back(static_cast<int8_t>(q));
      }
    }
  }
  return L;
}

}  // namespace detail

/// Quantize a compact model. Chunk-granularity models keep their dense shape
/// and encode masked chunks as absent; filter-granularity models arrive with
/// rows already removed, so their bitmaps are (almost always) all alive.
inline PackedModel quantize(const CompactModel& cm, QuantScheme scheme,
                            bool dense_layout = false) {
  const ModelParams& p = cm.params;
  PackedModel pm;
  pm.scheme = scheme;
  pm.granularity = cm.granularity;
  pm.feat_dim = p.topo.feat_dim;
  pm.emb_dim = p.topo.emb_dim;
  for (size_t l = 0; l < p.W.size(); ++l)
    pm.layers.push_back(detail::pack_layer(
        p.W[l], p.b[l], p.topo.layers[l].offsets, p.topo.layers[l].in_dim,
        /*skippable=*/l < kSparseLayers, scheme, dense_layout));
  pm.segment = detail::pack_layer(p.W_seg, p.b_seg, {0},
                                  2 * p.topo.layers.back().out_dim,
                                  /*skippable=*/false, scheme, dense_layout);
  return pm;
}

/// Dense float reconstruction (absent chunks are zero). Used by tests and by
/// anyone who wants the plain Eigen inference path on a packed file.
inline TdnnParamsT<float> dequantize(const PackedModel& pm) {
  TdnnParamsT<float> p;
  p.topo.feat_dim = pm.feat_dim;
  p.topo.emb_dim = pm.emb_dim;
  p.topo.n_classes = 0;
  const int cw = pm.chunk_w();
  auto expand = [&](const PackedLayer& L) {
    Eigen::MatrixXf W = Eigen::MatrixXf::Zero(L.out_dim, L.width);
    for (int r = 0; r < L.out_dim; ++r) {
      int64_t pos = L.payload_start[r];
      for (int j = 0; j < L.n_chunks(cw); ++j) {
        if (!L.alive(r, j, cw)) continue;
        const int col0 = j * cw;
        const int w = std::min(cw, L.width - col0);
        for (int u = 0; u < w; ++u) {
          const float q = pm.scheme == QuantScheme::Int16Chunk8
                              ? static_cast<float>(L.q16[pos + u])
                              : static_cast<float>(L.q8[pos + u]);
          W(r, col0 + u) = L.scale[r] * q;
        }
        pos += cw;
      }
    }
    return W;
  };
  for (const auto& L : pm.layers) {
    p.topo.layers.push_back(
        {"layer" + std::to_string(p.topo.layers.size() + 1), L.offsets, L.in_dim,
         L.out_dim});
    p.W.push_back(expand(L));
    p.b.push_back(
        Eigen::Map<const Eigen::VectorXf>(L.bias.data(), L.out_dim));
  }
  p.topo.hidden = pm.layers.back().out_dim;
  p.W_seg = expand(pm.segment);
  p.b_seg = Eigen::Map<const Eigen::VectorXf>(pm.segment.bias.data(),
                                              pm.segment.out_dim);
  p.W_cls.resize(0, pm.emb_dim);
  return p;
}

// ---------------------------------------------------------------------------
// Serialization: magic "SPKP", version, scheme, granularity, dims, layers,
// CRC32 trailer over everything before it.

namespace detail {

inline void put_packed_layer(ByteWriter& w, const PackedLayer& L, QuantScheme scheme) {
  w.u32(static_cast<uint32_t>(L.in_dim));
  w.u32(static_cast<uint32_t>(L.out_dim));
  w.u32(static_cast<uint32_t>(L.offsets.size()));
  for (int o : L.offsets) w.i32(o);
  w.u8(L.skippable ? 1 : 0);
  for (float v : L.bias) w.f32(v);
  for (float v : L.scale) w.f32(v);
  if (L.skippable) w.bytes(L.bitmap);
  if (scheme == QuantScheme::Int16Chunk8)
    w.bytes({reinterpret_cast<const uint8_t*>(L.q16.data()), L.q16.size() * 2});
  else
    w.bytes({reinterpret_cast<const uint8_t*>(L.q8.data()), L.q8.size()});
}

inline PackedLayer take_packed_layer(ByteReader& r, QuantScheme scheme) {
  PackedLayer L;
  L.in_dim = static_cast<int>(r.u32());
  L.out_dim = static_cast<int>(r.u32());
  const uint32_t n_off = r.u32();
  if (L.in_dim < 1 || L.out_dim < 1 || n_off < 1 || n_off > 64)
    throw FormatError("packed layer header is implausible");
  for (uint32_t i = 0; i < n_off; ++i) L.offsets.push_back(r.i32());
  for (uint32_t i = 1; i < n_off; ++i)
    if (L.offsets[i] <= L.offsets[i - 1])
      throw FormatError("packed layer offsets not increasing");
  L.width = L.in_dim * static_cast<int>(n_off);
  L.skippable = r.u8() != 0;

  const int cw = scheme_chunk_width(scheme);
  const int chunks = L.n_chunks(cw);
  const int row_bytes = L.bitmap_row_bytes(cw);
  L.bias.resize(L.out_dim);
  L.scale.resize(L.out_dim);
  for (auto& v : L.bias) v = r.f32();
  for (auto& v : L.scale) v = r.f32();
  if (L.skippable) {
    auto bm = r.take(static_cast<size_t>(L.out_dim) * row_bytes);
    L.bitmap.assign(bm.begin(), bm.end());
  } else {
    L.bitmap.assign(static_cast<size_t>(L.out_dim) * row_bytes, 0);
    for (int row = 0; row < L.out_dim; ++row)
      for (int j = 0; j < chunks; ++j)
        L.bitmap[static_cast<size_t>(row) * row_bytes + j / 8] |=
            static_cast<uint8_t>(1u << (j % 8));
  }
  // stray bits past the last chunk would corrupt payload accounting
  if (chunks % 8 != 0)
    for (int row = 0; row < L.out_dim; ++row)
      if (L.bitmap[static_cast<size_t>(row) * row_bytes + row_bytes - 1] &
          ~((1u << (chunks % 8)) - 1))
        throw FormatError("packed bitmap has bits beyond the last chunk");

  int64_t alive_total = 0;
  L.payload_start.resize(L.out_dim);
  for (int row = 0; row < L.out_dim; ++row) {
    L.payload_start[row] = alive_total * cw;
    for (int j = 0; j < chunks; ++j) alive_total += L.alive(row, j, cw);
  }
  const size_t payload_bytes = static_cast<size_t>(alive_total) * 16;
  auto body = r.take(payload_bytes);
  if (scheme == QuantScheme::Int16Chunk8) {
    L.q16.resize(payload_bytes / 2);
    std::memcpy(L.q16.data(), body.data(), payload_bytes);
  } else {
    L.q8.resize(payload_bytes);
    std::memcpy(L.q8.data(), body.data(), payload_bytes);
  }
  return L;
}

}  // namespace detail

inline std::vector<uint8_t> serialize_packed(const PackedModel& pm) {
  ByteWriter w;
  w.magic("SPKP");
  w.u32(kPackedVersion);
  w.u8(static_cast<uint8_t>(pm.scheme));
  w.u8(static_cast<uint8_t>(pm.granularity));
  w.u16(0);
  w.u32(static_cast<uint32_t>(pm.feat_dim));
  w.u32(static_cast<uint32_t>(pm.emb_dim));
  w.u32(static_cast<uint32_t>(pm.layers.size()));
  for (const auto& L : pm.layers) detail::put_packed_layer(w, L, pm.scheme);
  detail::put_packed_layer(w, pm.segment, pm.scheme);
  w.crc_trailer();
  return w.data();
}

inline PackedModel deserialize_packed(std::span<const uint8_t> bytes) {
  ByteReader::check_crc_trailer(bytes, "packed model");
  ByteReader r(bytes.first(bytes.size() - 4));
  r.magic("SPKP", "packed model");
  const uint32_t version = r.u32();
  if (version != kPackedVersion)
    throw FormatError("unsupported packed-model version " + std::to_string(version));
  PackedModel pm;
  const uint8_t scheme = r.u8();
  if (scheme > 1) throw FormatError("unknown quantization scheme code");
  pm.scheme = static_cast<QuantScheme>(scheme);
  const uint8_t gran = r.u8();
  if (gran > 2) throw FormatError("unknown granularity code");
  pm.granularity = static_cast<Granularity>(gran);
  r.u16();
  pm.feat_dim = static_cast<int>(r.u32());
  pm.emb_dim = static_cast<int>(r.u32());
  const uint32_t n_layers = r.u32();
  if (pm.feat_dim < 1 || pm.emb_dim < 1 || n_layers != 5)
    throw FormatError("packed model header is implausible");
  for (uint32_t l = 0; l < n_layers; ++l)
    pm.layers.push_back(detail::take_packed_layer(r, pm.scheme));
  pm.segment = detail::take_packed_layer(r, pm.scheme);
  if (!r.eof()) throw FormatError("packed model has trailing bytes");

  for (uint32_t l = 1; l < n_layers; ++l)
    if (pm.layers[l].in_dim != pm.layers[l - 1].out_dim)
      throw FormatError("packed layer dimensions do not chain");
  if (pm.layers[0].in_dim != pm.feat_dim ||
      pm.segment.width != 2 * pm.layers.back().out_dim ||
      pm.segment.out_dim != pm.emb_dim)
    throw FormatError("packed model dimensions do not chain");
  return pm;
}

inline void write_packed_file(const std::filesystem::path& path, const PackedModel& pm) {
  write_file(path, serialize_packed(pm));
}

inline PackedModel read_packed_file(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return deserialize_packed(bytes);
}

// ---------------------------------------------------------------------------
// Chunk-skipping inference.

namespace detail {

/// One affine layer over frame-major activations. x has frames of
/// `padded_width` floats (zero beyond `width`), so full-width chunk dot
/// products are safe; absent chunks are skipped entirely.
template <typename QT, int CW>
void chunked_affine(const PackedLayer& L, const std::vector<QT>& payload,
                    const float* x, int n_frames, int padded_width, bool relu,
                    float* y) {
  const int chunks = L.n_chunks(CW);
  const int row_bytes = L.bitmap_row_bytes(CW);
  for (int t = 0; t < n_frames; ++t) {
    const float* frame = x + static_cast<int64_t>(t) * padded_width;
    float* out = y + static_cast<int64_t>(t) * L.out_dim;
    for (int r = 0; r < L.out_dim; ++r) {
      const uint8_t* bits = L.bitmap.data() + static_cast<size_t>(r) * row_bytes;
      const QT* q = payload.data() + L.payload_start[r];
      float acc = 0.0f;
      for (int j = 0; j < chunks; ++j) {
        if (!((bits[j / 8] >> (j % 8)) & 1u)) continue;
        const float* xp = frame + j * CW;
        for (int u = 0; u < CW; ++u) acc += static_cast<float>(q[u]) * xp[u];
        q += CW;
      }
      float v = L.scale[r] * acc + L.bias[r];
      out[r] = relu ? std::max(v, 0.0f) : v;
    }
  }
}

inline void run_layer(const PackedModel& pm, const PackedLayer& L, const float* x,
                      int n_frames, int padded_width, bool relu, float* y) {
  if (pm.scheme == QuantScheme::Int16Chunk8)
    chunked_affine<int16_t, 8>(L, L.q16, x, n_frames, padded_width, relu, y);
  else
    chunked_affine<int8_t, 16>(L, L.q8, x, n_frames, padded_width, relu, y);
}

}  // namespace detail

/// Embedding from a packed model; activations in 32-bit float throughout.
inline Embedding sparse_infer(const PackedModel& pm, const FeatureMatrix& feats) {
  const int T0 = feats.num_frames();
  if (feats.dim() != pm.feat_dim)
    throw Error("feature dim " + std::to_string(feats.dim()) +
                " != model feat dim " + std::to_string(pm.feat_dim));
  if (T0 < pm.min_frames())
    throw Error("utterance shorter than receptive field (" +
                std::to_string(pm.min_frames()) + " frames)");
  const int cw = pm.chunk_w();

  // frame-major activations
  std::vector<float> act(static_cast<size_t>(T0) * pm.feat_dim);
  for (int t = 0; t < T0; ++t)
    for (int d = 0; d < pm.feat_dim; ++d)
      act[static_cast<size_t>(t) * pm.feat_dim + d] = feats.frames(t, d);

  int T = T0;
  std::vector<float> spliced, next;
  for (const PackedLayer& L : pm.layers) {
    const int span = L.offsets.back() - L.offsets.front();
    const int T_out = T - span;
    const int padded = L.n_chunks(cw) * cw;
    spliced.assign(static_cast<size_t>(T_out) * padded, 0.0f);
    for (int t = 0; t < T_out; ++t) {
      float* dst = spliced.data() + static_cast<size_t>(t) * padded;
      for (size_t i = 0; i < L.offsets.size(); ++i) {
        const int src_t = t + L.offsets[i] - L.offsets.front();
        std::memcpy(dst + i * L.in_dim,
                    act.data() + static_cast<size_t>(src_t) * L.in_dim,
                    sizeof(float) * L.in_dim);
      }
    }
    next.resize(static_cast<size_t>(T_out) * L.out_dim);
    detail::run_layer(pm, L, spliced.data(), T_out, padded, /*relu=*/true,
                      next.data());
    act.swap(next);
    T = T_out;
  }

  // stats pooling in float: mean and floored-population-variance std
  const int h = pm.layers.back().out_dim;
  std::vector<float> pooled(static_cast<size_t>(pm.segment.n_chunks(cw)) * cw, 0.0f);
  for (int c = 0; c < h; ++c) {
    float mean = 0.0f;
    for (int t = 0; t < T; ++t) mean += act[static_cast<size_t>(t) * h + c];
    mean /= static_cast<float>(T);
    float var = 0.0f;
    for (int t = 0; t < T; ++t) {
      const float d = act[static_cast<size_t>(t) * h + c] - mean;
      var += d * d;
    }
    var /= static_cast<float>(T);
    pooled[c] = mean;
    pooled[h + c] = std::sqrt(std::max(var, static_cast<float>(kVarianceFloor)));
  }

  Embedding emb(pm.emb_dim);
  detail::run_layer(pm, pm.segment, pooled.data(), 1,
                    static_cast<int>(pooled.size()), /*relu=*/false, emb.data());
  return emb;
}

// ---------------------------------------------------------------------------
// MAC accounting and timing.

/// Weight multiply-accumulates for one utterance of T frames. Alive chunks
/// count at their true width (tail chunks are shorter than the fetch), so an
/// all-alive model reports exactly rows*width*frames per layer.
inline int64_t count_macs(const PackedModel& pm, int T) {
  const int cw = pm.chunk_w();
  int64_t total = 0;
  auto layer_macs = [&](const PackedLayer& L, int frames) {
    const int chunks = L.n_chunks(cw);
    int64_t macs = 0;
    for (int r = 0; r < L.out_dim; ++r)
      for (int j = 0; j < chunks; ++j)
        if (L.alive(r, j, cw)) macs += std::min(cw, L.width - j * cw);
    return macs * frames;
  };
  for (const PackedLayer& L : pm.layers) {
    T -= L.offsets.back() - L.offsets.front();
    total += layer_macs(L, T);
  }
  total += layer_macs(pm.segment, 1);
  return total;
}

struct BenchResult {
  int64_t dense_macs = 0;
  int64_t sparse_macs = 0;
  int64_t wall_ns_dense = 0;
  int64_t wall_ns_sparse = 0;
  double speedup = 0.0;
};

/// Median wall time over `repeats` runs after 5 warmups, single thread.
inline BenchResult benchmark(const PackedModel& pm, const PackedModel& dense_ref,
                             const FeatureMatrix& feats, int repeats = 30) {
  if (repeats < 10) throw Error("benchmark needs at least 10 repeats");
  float sink = 0.0f;  // keeps the optimizer from dropping the timed calls
  auto time_model = [&](const PackedModel& m) {
    for (int i = 0; i < 5; ++i) sink += sparse_infer(m, feats)[0];
    std::vector<int64_t> ns(repeats);
    for (int i = 0; i < repeats; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      sink += sparse_infer(m, feats)[0];
      const auto t1 = std::chrono::steady_clock::now();
      ns[i] = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
    }
    std::nth_element(ns.begin(), ns.begin() + repeats / 2, ns.end());
    return ns[repeats / 2];
  };
  BenchResult r;
  r.sparse_macs = count_macs(pm, feats.num_frames());
  r.dense_macs = count_macs(dense_ref, feats.num_frames());
  r.wall_ns_sparse = time_model(pm);
  r.wall_ns_dense = time_model(dense_ref);
  if (sink == 12345.678f) throw Error("unreachable");
  r.speedup = static_cast<double>(r.wall_ns_dense) /
              static_cast<double>(r.wall_ns_sparse);
  return r;
}

}  // namespace sparsevox
