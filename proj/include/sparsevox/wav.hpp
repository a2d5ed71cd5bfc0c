// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sparsevox/common.hpp"

namespace sparsevox {

struct PcmSignal {
  std::vector<int16_t> samples;
  uint32_t sample_rate = 0;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

/// Decodes a RIFF/WAVE container holding 16-bit mono PCM.
/// Anything else (compressed, multi-channel, other bit depths) is rejected.
inline PcmSignal parse_wav(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.magic("RIFF", "WAV");
  r.u32();  // declared RIFF size, not trusted
  {
    auto tag = r.take(4);
    if (std::memcmp(tag.data(), "WAVE", 4) != 0)
      throw FormatError("RIFF container is not WAVE");
  }

  bool have_fmt = false;
  PcmSignal out;
  while (!r.eof()) {
    if (r.remaining() < 8) throw FormatError("truncated WAV chunk header");
    auto id = r.take(4);
    uint32_t size = r.u32();
    if (std::memcmp(id.data(), "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("WAV fmt chunk too short");
      uint16_t format = r.u16();
      uint16_t channels = r.u16();
      uint32_t rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      uint16_t bits = r.u16();
      r.take(size - 16);
      if (format != 1)
        throw UnsupportedError("unsupported WAV encoding: compression code " +
                               std::to_string(format) + " (PCM only)");
      if (channels != 1)
        throw UnsupportedError("unsupported WAV: " + std::to_string(channels) +
                               " channels (mono only)");
      if (bits != 16)
        throw UnsupportedError("unsupported WAV: " + std::to_string(bits) +
                               " bits per sample (16-bit only)");
      if (rate == 0) throw FormatError("WAV sample rate is zero");
      out.sample_rate = rate;
      have_fmt = true;
    } else if (std::memcmp(id.data(), "data", 4) == 0) {
      if (!have_fmt) throw FormatError("WAV data chunk precedes fmt chunk");
      auto payload = r.take(size);
      out.samples.resize(size / 2);
      std::memcpy(out.samples.data(), payload.data(), out.samples.size() * 2);
      return out;
    } else {
      // skip unknown chunk, chunks are word-aligned
      r.take(size + (size & 1));
    }
  }
  if (!have_fmt) throw FormatError("WAV has no fmt chunk");
  throw FormatError("WAV has no data chunk");
}

inline PcmSignal read_wav_file(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return parse_wav(bytes);
}

}  // namespace sparsevox
