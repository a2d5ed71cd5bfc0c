// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sparsevox/common.hpp"
#include "sparsevox/model.hpp"

namespace sparsevox {

/// One verification trial: is the `test` utterance spoken by the person
/// enrolled under `enroll`?
struct Trial {
  std::string enroll;
  std::string test;
  bool target = false;
};

using TrialList = std::vector<Trial>;

/// Scores and ground-truth labels for a batch of trials, kept in parallel
/// arrays so metric code can sort copies without touching utterance ids.
struct ScoreSet {
  std::vector<double> score;
  std::vector<uint8_t> target;  // 1 = same-speaker trial

  size_t size() const { return score.size(); }
  void add(double s, bool t) {
    score.push_back(s);
    target.push_back(t ? 1 : 0);
  }
};

namespace detail {

inline bool parse_trial_label(const std::string& token, bool* out) {
  if (token == "target") {
    *out = true;
    return true;
  }
  if (token == "nontarget") {
    *out = false;
    return true;
  }
  return false;
}

}  // namespace detail

/// Parse a trial list from text. One trial per line,
/// `<enroll_id> <test_id> <target|nontarget>`, blank lines ignored.
inline TrialList parse_trials(const std::string& text) {
  TrialList trials;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    Trial t;
    std::string label, extra;
    if (!(fields >> t.enroll)) continue;  // whitespace-only line
    if (!(fields >> t.test >> label))
      throw FormatError("trial list line " + std::to_string(lineno) +
                        ": expected <enroll> <test> <label>");
    if (fields >> extra)
      throw FormatError("trial list line " + std::to_string(lineno) +
                        ": unexpected trailing field '" + extra + "'");
    if (!detail::parse_trial_label(label, &t.target))
      throw FormatError("trial list line " + std::to_string(lineno) +
                        ": label must be target or nontarget, got '" + label +
                        "'");
    trials.push_back(std::move(t));
  }
  return trials;
}

inline TrialList read_trials_file(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return parse_trials(std::string(bytes.begin(), bytes.end()));
}

/// Render trials with their scores, one per line: the input format plus an
/// appended score field. Full precision so a written file re-evaluates to
/// the same metrics.
inline std::string format_scores(const TrialList& trials,
                                 const std::vector<double>& scores) {
  if (trials.size() != scores.size())
    throw Error("format_scores: trial/score count mismatch");
  std::ostringstream out;
  out.precision(17);
  for (size_t i = 0; i < trials.size(); ++i)
    out << trials[i].enroll << ' ' << trials[i].test << ' '
        << (trials[i].target ? "target" : "nontarget") << ' ' << scores[i]
        << '\n';
  return out.str();
}

/// Parse the 4-field output of `format_scores` back into a ScoreSet.
inline ScoreSet parse_scored(const std::string& text) {
  ScoreSet s;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::string enroll, test, label, extra;
    double score = 0.0;
    if (!(fields >> enroll)) continue;
    bool target = false;
    if (!(fields >> test >> label >> score) ||
        !detail::parse_trial_label(label, &target))
      throw FormatError("score file line " + std::to_string(lineno) +
                        ": expected <enroll> <test> <label> <score>");
    if (fields >> extra)
      throw FormatError("score file line " + std::to_string(lineno) +
                        ": unexpected trailing field '" + extra + "'");
    s.add(score, target);
  }
  return s;
}

using EmbeddingMap = std::map<std::string, Embedding>;

/// Cosine-score every trial against an id-to-embedding map, preserving
/// trial order.
inline ScoreSet score_trials(const EmbeddingMap& embeddings,
                             const TrialList& trials) {
  ScoreSet s;
  s.score.reserve(trials.size());
  s.target.reserve(trials.size());
  for (const auto& t : trials) {
    auto e = embeddings.find(t.enroll);
    auto u = embeddings.find(t.test);
    if (e == embeddings.end())
      throw Error("score_trials: unknown enroll id '" + t.enroll + "'");
    if (u == embeddings.end())
      throw Error("score_trials: unknown test id '" + t.test + "'");
    s.add(cosine_score(e->second, u->second), t.target);
  }
  return s;
}

namespace detail {

struct RocPoint {
  double far;  // accepted nontargets / nontargets
  double frr;  // rejected targets / targets
};

/// Operating points of the accept-if-score-at-least-threshold rule, swept
/// from above the maximum score (reject everything) down through every
/// distinct score (at the minimum, accept everything). FAR is nondecreasing
/// and FRR nonincreasing along the result.
inline std::vector<RocPoint> roc_points(const ScoreSet& s) {
  if (s.score.size() != s.target.size())
    throw Error("score set: score/label length mismatch");
  int64_t n_tgt = 0, n_non = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (!std::isfinite(s.score[i])) throw Error("score set: non-finite score");
    ++(s.target[i] ? n_tgt : n_non);
  }
  if (n_tgt == 0 || n_non == 0)
    throw Error("score set: need at least one target and one nontarget trial");

  std::vector<std::pair<double, bool>> by_score(s.size());
  for (size_t i = 0; i < s.size(); ++i)
    by_score[i] = {s.score[i], s.target[i] != 0};
  std::sort(by_score.begin(), by_score.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<RocPoint> pts;
  pts.reserve(s.size() + 1);
  pts.push_back({0.0, 1.0});
  int64_t acc_tgt = 0, acc_non = 0;
  size_t i = 0;
  while (i < by_score.size()) {
    const double v = by_score[i].first;
    for (; i < by_score.size() && by_score[i].first == v; ++i)
      ++(by_score[i].second ? acc_tgt : acc_non);
    pts.push_back({static_cast<double>(acc_non) / static_cast<double>(n_non),
                   static_cast<double>(n_tgt - acc_tgt) /
                       static_cast<double>(n_tgt)});
  }
  return pts;
}

}  // namespace detail

/// Equal error rate in percent. The sweep's step functions rarely meet
/// exactly, so the crossing is found by linear interpolation between the
/// last operating point with FAR < FRR and the first with FAR >= FRR.
inline double eer(const ScoreSet& s) {
  const auto pts = detail::roc_points(s);
  for (size_t k = 1; k < pts.size(); ++k) {
    if (pts[k].far < pts[k].frr) continue;
    const auto& a = pts[k - 1];
    const auto& b = pts[k];
    // a.frr > a.far and b.far >= b.frr, so the denominator is positive
    const double den = (b.far - a.far) + (a.frr - b.frr);
    const double t = (a.frr - a.far) / den;
    return 100.0 * (a.far + t * (b.far - a.far));
  }
  throw Error("eer: FAR never reached FRR");  // unreachable: last point is (1,0)
}

/// Normalized minimum detection cost. Minimizes
/// c_miss*p_target*FRR + c_fa*(1-p_target)*FAR over the same threshold
/// sweep as `eer` (reject-all included) and divides by the cost of the
/// better of the two trivial systems, so the result lands in [0, 1].
inline double min_dcf(const ScoreSet& s, double p_target = 0.01,
                      double c_miss = 1.0, double c_fa = 1.0) {
  if (!(p_target > 0.0) || !(p_target < 1.0))
    throw Error("min_dcf: p_target must be in (0, 1)");
  if (!(c_miss > 0.0) || !(c_fa > 0.0))
    throw Error("min_dcf: costs must be positive");
  const double w_miss = c_miss * p_target;
  const double w_fa = c_fa * (1.0 - p_target);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& pt : detail::roc_points(s))
    best = std::min(best, w_miss * pt.frr + w_fa * pt.far);
  return best / std::min(w_miss, w_fa);
}

/// Draw a verification protocol from a labeled utterance list. Target
/// trials pair two distinct utterances of one speaker, nontarget trials
/// pair utterances of two different speakers. Sampling is with
/// replacement, so long lists may repeat a pair; that only reweights the
/// empirical score distribution.
inline TrialList sample_trials(
    const std::vector<std::pair<std::string, std::string>>& utt_speaker,
    int n_target, int n_nontarget, uint64_t seed) {
  if (n_target < 0 || n_nontarget < 0)
    throw Error("sample_trials: negative trial count");
  std::map<std::string, std::vector<std::string>> by_speaker;
  for (const auto& [utt, spk] : utt_speaker) by_speaker[spk].push_back(utt);

  std::vector<const std::vector<std::string>*> speakers;
  std::vector<const std::vector<std::string>*> multi;  // >= 2 utterances
  for (const auto& [spk, utts] : by_speaker) {
    speakers.push_back(&utts);
    if (utts.size() >= 2) multi.push_back(&utts);
  }
  if (n_target > 0 && multi.empty())
    throw Error("sample_trials: no speaker has two utterances");
  if (n_nontarget > 0 && speakers.size() < 2)
    throw Error("sample_trials: need at least two speakers");

  Rng rng(mix_seed(seed, 0x7217a1));
  TrialList trials;
  trials.reserve(static_cast<size_t>(n_target) + n_nontarget);
  for (int k = 0; k < n_target; ++k) {
    const auto& utts = *multi[rng.uniform_int(static_cast<int>(multi.size()))];
    const int i = rng.uniform_int(static_cast<int>(utts.size()));
    int j = rng.uniform_int(static_cast<int>(utts.size()) - 1);
    if (j >= i) ++j;
    trials.push_back({utts[i], utts[j], true});
  }
  for (int k = 0; k < n_nontarget; ++k) {
    const int a = rng.uniform_int(static_cast<int>(speakers.size()));
    int b = rng.uniform_int(static_cast<int>(speakers.size()) - 1);
    if (b >= a) ++b;
    const auto& ua = *speakers[a];
    const auto& ub = *speakers[b];
    trials.push_back({ua[rng.uniform_int(static_cast<int>(ua.size()))],
                      ub[rng.uniform_int(static_cast<int>(ub.size()))], false});
  }
  return trials;
}

// ---------------------------------------------------------------------------
// Embedding files

constexpr uint32_t kEmbeddingsVersion = 1;

inline std::vector<uint8_t> serialize_embeddings(const EmbeddingMap& embs) {
  ByteWriter w;
  w.magic("EMBS");
  w.u32(kEmbeddingsVersion);
  w.u32(static_cast<uint32_t>(embs.size()));
  for (const auto& [id, e] : embs) {
    w.str(id);
    w.u32(static_cast<uint32_t>(e.size()));
    for (Eigen::Index i = 0; i < e.size(); ++i) w.f32(e[i]);
  }
  return w.data();
}

inline EmbeddingMap deserialize_embeddings(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  r.magic("EMBS", "embeddings file");
  const uint32_t version = r.u32();
  if (version != kEmbeddingsVersion)
    throw FormatError("embeddings file: unsupported version " +
                      std::to_string(version));
  const uint32_t n = r.u32();
  EmbeddingMap embs;
  for (uint32_t k = 0; k < n; ++k) {
    std::string id = r.str();
    const uint32_t dim = r.u32();
    Embedding e(dim);
    for (uint32_t i = 0; i < dim; ++i) e[i] = r.f32();
    if (!embs.emplace(std::move(id), std::move(e)).second)
      throw FormatError("embeddings file: duplicate id");
  }
  if (!r.eof()) throw FormatError("embeddings file: trailing bytes");
  return embs;
}

inline void write_embeddings_file(const std::filesystem::path& path,
                                  const EmbeddingMap& embs) {
  write_file(path, serialize_embeddings(embs));
}

inline EmbeddingMap read_embeddings_file(const std::filesystem::path& path) {
  return deserialize_embeddings(read_file(path));
}

}  // namespace sparsevox
