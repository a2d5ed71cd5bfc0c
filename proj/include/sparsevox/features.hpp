// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/FFT>

#include "sparsevox/common.hpp"
#include "sparsevox/wav.hpp"

namespace sparsevox {

constexpr double kDefaultFrameShift = 0.010;  // seconds between frames

/// T x dim matrix of frame features, row per frame.
struct FeatureMatrix {
  Eigen::MatrixXf frames;
  double frame_shift = kDefaultFrameShift;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
};

namespace detail {

// floor added to filterbank energies before the log, keeps silence finite
constexpr double kMelFloor = 1e-10;

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank over FFT bin center frequencies, 0 Hz..Nyquist.
/// Returns n_mels x (fft_size/2 + 1) weights.
inline Eigen::MatrixXd mel_filterbank(int n_mels, int fft_size, double sample_rate) {
  const int n_bins = fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(0.0);
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));

  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, n_bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = sample_rate * k / fft_size;
      if (f > lo && f < mid)
        fb(m, k) = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        fb(m, k) = (hi - f) / (hi - mid);
    }
  }
  return fb;
}

inline int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace detail

/// Log mel-filterbank features. Frames of `win` seconds every `shift` seconds,
/// Hamming window, power spectrum, triangular mel filters, natural log with a
/// small floor. T = floor((len - win_samples)/shift_samples) + 1.
inline FeatureMatrix log_mel(const PcmSignal& signal, int n_mels = 40,
                             double win = 0.025, double shift = 0.010) {
  if (signal.sample_rate == 0) throw Error("log_mel: sample rate is zero");
  const int win_samples = static_cast<int>(std::lround(win * signal.sample_rate));
  const int shift_samples = static_cast<int>(std::lround(shift * signal.sample_rate));
  if (win_samples <= 0 || shift_samples <= 0)
    throw Error("log_mel: window/shift too small for sample rate");
  const auto len = static_cast<long>(signal.samples.size());
  if (len < win_samples)
    throw Error("log_mel: signal shorter than one analysis window");

  const int n_frames = static_cast<int>((len - win_samples) / shift_samples) + 1;
  const int fft_size = detail::next_pow2(win_samples);
  const int n_bins = fft_size / 2 + 1;

  Eigen::VectorXd window(win_samples);
  for (int i = 0; i < win_samples; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (win_samples - 1));

  const Eigen::MatrixXd fb = detail::mel_filterbank(n_mels, fft_size, signal.sample_rate);

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> time(fft_size), freq(fft_size);

  FeatureMatrix out;
  out.frames.resize(n_frames, n_mels);
  out.frame_shift = static_cast<double>(shift_samples) / signal.sample_rate;

  Eigen::VectorXd power(n_bins);
  for (int t = 0; t < n_frames; ++t) {
    const long start = static_cast<long>(t) * shift_samples;
    for (int i = 0; i < win_samples; ++i)
      time[i] = {signal.samples[start + i] * window[i], 0.0};
    std::fill(time.begin() + win_samples, time.end(), std::complex<double>{});
    fft.fwd(freq, time);
    for (int k = 0; k < n_bins; ++k) power[k] = std::norm(freq[k]);
    Eigen::VectorXd mel = fb * power;
    for (int m = 0; m < n_mels; ++m)
      out.frames(t, m) = static_cast<float>(std::log(mel[m] + detail::kMelFloor));
  }
  return out;
}

/// Sliding-window mean normalization. Each frame gets the mean of the frames
/// in a window of ~`window` seconds around it subtracted, per dimension. The
/// window stays centered in the interior and stops sliding at the utterance
/// edges; utterances shorter than the window get global mean subtraction.
inline FeatureMatrix sliding_cmn(const FeatureMatrix& feats, double window = 3.0) {
  const int T = feats.num_frames();
  if (T < 1) throw Error("sliding_cmn: empty feature matrix");
  const int w = std::max<int>(1, static_cast<int>(std::lround(window / feats.frame_shift)));

  FeatureMatrix out;
  out.frame_shift = feats.frame_shift;
  out.frames.resizeLike(feats.frames);

  if (T <= w) {
    Eigen::RowVectorXf mean = feats.frames.colwise().mean();
    out.frames = feats.frames.rowwise() - mean;
    return out;
  }
  for (int t = 0; t < T; ++t) {
    int start = std::clamp(t - w / 2, 0, T - w);
    Eigen::RowVectorXf mean = feats.frames.middleRows(start, w).colwise().mean();
    out.frames.row(t) = feats.frames.row(t) - mean;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature dump format: "FTMX", u32 T, u32 dim, then T*dim row-major f32.

inline std::vector<uint8_t> serialize_features(const FeatureMatrix& fm) {
  ByteWriter w;
  w.magic("FTMX");
  w.u32(static_cast<uint32_t>(fm.num_frames()));
  w.u32(static_cast<uint32_t>(fm.dim()));
  for (int t = 0; t < fm.num_frames(); ++t)
    for (int d = 0; d < fm.dim(); ++d) w.f32(fm.frames(t, d));
  return w.data();
}

inline FeatureMatrix deserialize_features(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.magic("FTMX", "feature");
  const uint32_t T = r.u32();
  const uint32_t dim = r.u32();
  FeatureMatrix fm;
  fm.frames.resize(T, dim);
  for (uint32_t t = 0; t < T; ++t)
    for (uint32_t d = 0; d < dim; ++d) fm.frames(t, d) = r.f32();
  return fm;
}

inline void write_feature_file(const std::filesystem::path& path,
                               const FeatureMatrix& fm) {
  write_file(path, serialize_features(fm));
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return deserialize_features(bytes);
}

}  // namespace sparsevox
