// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sparsevox/common.hpp"
#include "sparsevox/features.hpp"

namespace sparsevox {

/// Desk-scale synthetic speaker dataset parameters.
struct SynthConfig {
  int n_speakers = 64;
  int utts_per_speaker = 10;
  int min_frames = 60;
  int max_frames = 80;
  uint64_t seed = 1;
  double intra_speaker_noise = 0.1;
  int dim = 40;

  void validate() const {
    if (n_speakers < 2) throw Error("synth: need at least 2 speakers");
    if (utts_per_speaker < 1) throw Error("synth: utts_per_speaker must be >= 1");
    if (min_frames < 25)
      throw Error("synth: min_frames must be >= 25 (one full context window)");
    if (max_frames < min_frames) throw Error("synth: max_frames < min_frames");
    if (intra_speaker_noise < 0) throw Error("synth: negative intra_speaker_noise");
    if (dim < 1) throw Error("synth: dim must be positive");
  }
};

/// Frame distribution parameters of one speaker: frames are
/// mean + mixing * (AR(1) noise). Both are deterministic in (seed, speaker).
struct SpeakerProfile {
  Eigen::VectorXd mean;    // dim
  Eigen::MatrixXd mixing;  // dim x dim
};

struct Utterance {
  FeatureMatrix feats;
  int speaker = 0;
};

namespace detail {

constexpr double kArCoef = 0.9;       // temporal correlation of the latent noise
constexpr double kMeanSpread = 2.0;   // per-dim std of speaker means

constexpr uint64_t kProfileStream = 1;
constexpr uint64_t kUttStream = 2;

}  // namespace detail

inline SpeakerProfile speaker_profile(const SynthConfig& cfg, int speaker) {
  Rng rng(mix_seed(cfg.seed, detail::kProfileStream, static_cast<uint64_t>(speaker)));
  SpeakerProfile p;
  p.mean.resize(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i) p.mean[i] = detail::kMeanSpread * rng.gauss();
  // Gaussian mixing scaled by 1/sqrt(dim): roughly unit gain, never blows up.
  p.mixing.resize(cfg.dim, cfg.dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  for (int r = 0; r < cfg.dim; ++r)
    for (int c = 0; c < cfg.dim; ++c) p.mixing(r, c) = scale * rng.gauss();
  return p;
}

/// One utterance: frame count drawn from [min_frames, max_frames], a per-utt
/// mean offset of magnitude intra_speaker_noise, and an AR(1) latent process
/// (coefficient 0.9, unit innovations, stationary start) through the mixing.
inline FeatureMatrix synth_utterance(const SynthConfig& cfg, const SpeakerProfile& prof,
                                     int speaker, int utt) {
  Rng rng(mix_seed(cfg.seed, detail::kUttStream, static_cast<uint64_t>(speaker),
                   static_cast<uint64_t>(utt)));
  const int T = cfg.min_frames + rng.uniform_int(cfg.max_frames - cfg.min_frames + 1);

  Eigen::VectorXd offset(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i)
    offset[i] = cfg.intra_speaker_noise * rng.gauss();

  const double stationary_std = 1.0 / std::sqrt(1.0 - detail::kArCoef * detail::kArCoef);
  Eigen::VectorXd x(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i) x[i] = stationary_std * rng.gauss();

  FeatureMatrix fm;
  fm.frames.resize(T, cfg.dim);
  Eigen::VectorXd innov(cfg.dim);
  for (int t = 0; t < T; ++t) {
    if (t > 0) {
      for (int i = 0; i < cfg.dim; ++i) innov[i] = rng.gauss();
      x = detail::kArCoef * x + innov;
    }
    Eigen::VectorXd frame = prof.mean + offset + prof.mixing * x;
    fm.frames.row(t) = frame.cast<float>().transpose();
  }
  return fm;
}

/// Full dataset, ordered speaker-major. Identical cfg gives a bit-identical
/// result; every utterance depends only on (seed, speaker, utt).
inline std::vector<Utterance> synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Utterance> out;
  out.reserve(static_cast<size_t>(cfg.n_speakers) * cfg.utts_per_speaker);
  for (int s = 0; s < cfg.n_speakers; ++s) {
    SpeakerProfile prof = speaker_profile(cfg, s);
    for (int u = 0; u < cfg.utts_per_speaker; ++u)
      out.push_back({synth_utterance(cfg, prof, s, u), s});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: one FTMX file per utterance plus labels.tsv
// (<relative path>\t<speaker id> per line).

inline void save_dataset(const std::filesystem::path& dir,
                         const std::vector<Utterance>& utts) {
  std::filesystem::create_directories(dir);
  std::ofstream labels(dir / "labels.tsv", std::ios::trunc);
  if (!labels) throw Error("cannot write " + (dir / "labels.tsv").string());
  int counter = 0;
  for (const auto& u : utts) {
    char name[48];
    std::snprintf(name, sizeof name, "spk%04d_utt%05d.ftmx", u.speaker, counter++);
    write_feature_file(dir / name, u.feats);
    labels << name << '\t' << u.speaker << '\n';
  }
}

inline std::vector<Utterance> load_dataset(const std::filesystem::path& dir) {
  std::ifstream labels(dir / "labels.tsv");
  if (!labels) throw Error("cannot open " + (dir / "labels.tsv").string());
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError("labels.tsv: expected <path>\\t<speaker>: " + line);
    Utterance u;
    u.feats = read_feature_file(dir / line.substr(0, tab));
    u.speaker = std::stoi(line.substr(tab + 1));
    out.push_back(std::move(u));
  }
  if (out.empty()) throw FormatError("labels.tsv: no utterances listed");
  return out;
}

}  // namespace sparsevox
