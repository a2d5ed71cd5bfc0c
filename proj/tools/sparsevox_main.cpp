// Copyright 2026 The sparsevox Authors
// SPDX-License-Identifier: Apache-2.0
//
// sparsevox: train, sparsify, pack and evaluate compact speaker-embedding
// models. One binary, subcommand style. Exit codes: 0 success, 1 usage
// error, 2 data error, 3 numerical divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sparsevox/checkpoint.hpp"
#include "sparsevox/compact.hpp"
#include "sparsevox/eval.hpp"
#include "sparsevox/features.hpp"
#include "sparsevox/packed.hpp"
#include "sparsevox/synth.hpp"
#include "sparsevox/trainer.hpp"
#include "sparsevox/wav.hpp"

namespace fs = std::filesystem;
using namespace sparsevox;

namespace {

// ---------------------------------------------------------------------------
// features / synth

struct FeaturesArgs {
  std::vector<std::string> wavs;
  std::string out;
  double cmn_window = 3.0;
  bool no_cmn = false;
  int n_mels = 40;
};

int run_features(const FeaturesArgs& a) {
  const bool out_is_dir = a.wavs.size() > 1 || fs::is_directory(a.out);
  if (out_is_dir) fs::create_directories(a.out);
  for (const auto& wav_path : a.wavs) {
    PcmSignal sig = read_wav_file(wav_path);
    FeatureMatrix fm = log_mel(sig, a.n_mels);
    if (!a.no_cmn) fm = sliding_cmn(fm, a.cmn_window);
    fs::path out = out_is_dir
                       ? fs::path(a.out) / fs::path(wav_path).stem().concat(".ftmx")
                       : fs::path(a.out);
    write_feature_file(out, fm);
    std::printf("%s: %d frames x %d -> %s\n", wav_path.c_str(), fm.num_frames(),
                fm.dim(), out.c_str());
  }
  return 0;
}

int run_synth(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  auto utts = synth_dataset(cfg);
  save_dataset(out_dir, utts);
  std::printf("wrote %zu utterances (%d speakers) to %s\n", utts.size(),
              cfg.n_speakers, out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// shared training plumbing

struct TrainArgs {
  std::string data_dir;
  std::string out;
  std::string metrics;
  double width = 1.0;
  int val_per_speaker = 2;
  int val_targets = 500;
  int val_nontargets = 500;
  TrainConfig cfg;
};

void add_train_options(CLI::App* cmd, TrainArgs& a, bool lr_defaults_desk) {
  if (lr_defaults_desk) {
    // desk-scale presets; the full-scale defaults stay one flag away
    a.cfg.batch_size = 16;
    a.cfg.segment_min = 0.4;
    a.cfg.segment_max = 0.6;
  }
  cmd->add_option("--data", a.data_dir, "dataset directory (labels.tsv + .ftmx)")
      ->required();
  cmd->add_option("--out", a.out, "output checkpoint path")->required();
  cmd->add_option("--metrics", a.metrics, "append per-epoch CSV rows here");
  cmd->add_option("--width", a.width, "layer width multiplier");
  cmd->add_option("--epochs", a.cfg.epochs, "training epochs");
  cmd->add_option("--lr-start", a.cfg.lr_start, "initial learning rate");
  cmd->add_option("--lr-end", a.cfg.lr_end, "final learning rate");
  cmd->add_option("--weight-decay", a.cfg.weight_decay, "L2 weight decay");
  cmd->add_option("--momentum", a.cfg.momentum, "SGD momentum (0 = plain SGD)");
  cmd->add_option("--batch", a.cfg.batch_size, "utterances per batch");
  cmd->add_option("--segment-min", a.cfg.segment_min, "crop length lower bound, s");
  cmd->add_option("--segment-max", a.cfg.segment_max, "crop length upper bound, s");
  cmd->add_option("--margin", a.cfg.am.margin, "AM-softmax margin");
  cmd->add_option("--scale", a.cfg.am.scale, "AM-softmax scale");
  cmd->add_option("--seed", a.cfg.seed, "run seed");
  cmd->add_option("--jobs", a.cfg.jobs, "batch-gradient workers (1 = bit-reproducible)");
  cmd->add_option("--val-per-speaker", a.val_per_speaker,
                  "utterances per speaker held out for validation");
  cmd->add_option("--val-targets", a.val_targets, "validation target trials");
  cmd->add_option("--val-nontargets", a.val_nontargets,
                  "validation nontarget trials");
}

struct PreparedData {
  TrainSet train;
  std::optional<EvalSet> val;
};

PreparedData prepare_data(const TrainArgs& a) {
  auto utts = load_dataset(a.data_dir);
  PreparedData d;
  if (a.val_per_speaker > 0) {
    auto [train_utts, val_utts] = split_per_speaker(utts, a.val_per_speaker);
    d.train = to_train_set(train_utts);
    d.val = make_eval_set(val_utts, a.val_targets, a.val_nontargets,
                          mix_seed(a.cfg.seed, 0xEA17));
  } else {
    d.train = to_train_set(utts);
  }
  return d;
}

/// Per-epoch log line, CSV append, and checkpoint write, so a later
/// divergence still leaves the last finished epoch on disk.
EpochCallback make_epoch_callback(const TrainArgs& a) {
  if (!a.metrics.empty() && !fs::exists(a.metrics)) {
    std::ofstream head(a.metrics);
    head << metrics_csv_header() << '\n';
  }
  return [a](const EpochMetrics& m, const ModelParams& p) {
    std::printf("%s\n", metrics_csv_row(m).c_str());
    std::fflush(stdout);
    if (!a.metrics.empty()) {
      std::ofstream csv(a.metrics, std::ios::app);
      csv << metrics_csv_row(m) << '\n';
    }
    write_model_file(a.out, p);
  };
}

void finish_stage(const TrainArgs& a, const StageResult& r) {
  write_model_file(a.out, r.best_params);
  if (r.best_epoch >= 0)
    std::printf("kept epoch %d (val EER %.3f%%) -> %s\n", r.best_epoch,
                r.best_val_eer, a.out.c_str());
  else
    std::printf("kept final epoch -> %s\n", a.out.c_str());
}

int run_train_baseline(const TrainArgs& args) {
  TrainArgs a = args;
  a.cfg.stage = Stage::Baseline;
  auto d = prepare_data(a);
  const auto topo = make_topology(a.width, d.train.n_classes);
  auto init = random_params(topo, a.cfg.seed);
  std::printf("%s\n", metrics_csv_header().c_str());
  auto r = run_stage(a.cfg, d.train, d.val ? &*d.val : nullptr, std::move(init),
                     nullptr, make_epoch_callback(a));
  finish_stage(a, r);
  return 0;
}

void print_sparsity(const ModelParams& p, const GroupPartition& part,
                    const SparsityMask& mask) {
  const auto rep = sparsity_report(p.topo, part, mask);
  for (const auto& l : rep.layers)
    std::printf("%s: %d/%d groups zero (%.1f%%)\n", l.layer.c_str(),
                l.zero_groups, l.groups, 100.0 * l.fraction);
  std::printf("nonzero params: %lld\n",
              static_cast<long long>(rep.nonzero_params));
}

int run_sparsify(const TrainArgs& args, const std::string& init_path,
                 const std::string& mask_out) {
  TrainArgs a = args;
  a.cfg.stage = Stage::Sparsify;
  auto d = prepare_data(a);
  auto init = read_model_file(init_path);
  std::printf("%s\n", metrics_csv_header().c_str());
  auto r = run_stage(a.cfg, d.train, d.val ? &*d.val : nullptr, std::move(init),
                     nullptr, make_epoch_callback(a));
  // the thresholded weights, not the best-by-EER snapshot, carry the mask
  write_model_file(a.out, r.params);
  const std::string mask_path = mask_out.empty() ? a.out + ".mask" : mask_out;
  write_mask_file(mask_path, r.mask);
  std::printf("mask -> %s\n", mask_path.c_str());
  const auto part = build_groups(r.params.topo, a.cfg.granularity);
  print_sparsity(r.params, part, r.mask);
  return 0;
}

int run_finetune(const TrainArgs& args, const std::string& init_path,
                 const std::string& mask_path) {
  TrainArgs a = args;
  a.cfg.stage = Stage::FineTune;
  auto d = prepare_data(a);
  auto init = read_model_file(init_path);
  const SparsityMask mask = read_mask_file(mask_path);
  std::printf("%s\n", metrics_csv_header().c_str());
  auto r = run_stage(a.cfg, d.train, d.val ? &*d.val : nullptr, std::move(init),
                     &mask, make_epoch_callback(a));
  finish_stage(a, r);
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

int run_sweep(const TrainArgs& args, const std::vector<double>& lambdas,
              const std::string& baseline_path, int sparsify_epochs,
              int finetune_epochs, const std::string& csv_out) {
  if (lambdas.empty()) throw Error("sweep: need at least one lambda");
  TrainArgs a = args;
  auto d = prepare_data(a);
  if (!d.val) throw Error("sweep: needs a validation split (--val-per-speaker > 0)");

  ModelParams baseline;
  if (!baseline_path.empty()) {
    baseline = read_model_file(baseline_path);
  } else {
    TrainArgs b = a;
    b.cfg.stage = Stage::Baseline;
    std::printf("training baseline (%d epochs)\n", b.cfg.epochs);
    baseline = run_stage(b.cfg, d.train, &*d.val,
                         random_params(make_topology(a.width, d.train.n_classes),
                                       a.cfg.seed))
                   .best_params;
    write_model_file(a.out, baseline);
  }

  std::ostringstream csv;
  csv << "lambda,granularity,nonzero_params,sparsity_l1,sparsity_l2,"
         "sparsity_l3,sparsity_l4,eer,min_dcf\n";
  const auto part = build_groups(baseline.topo, a.cfg.granularity);
  for (double lambda : lambdas) {
    TrainArgs s = a;
    s.cfg.stage = Stage::Sparsify;
    s.cfg.lambda = lambda;
    if (sparsify_epochs > 0) s.cfg.epochs = sparsify_epochs;
    std::printf("lambda %g: sparsify (%d epochs)\n", lambda, s.cfg.epochs);
    auto sp = run_stage(s.cfg, d.train, nullptr, baseline);

    TrainArgs f = a;
    f.cfg.stage = Stage::FineTune;
    if (finetune_epochs > 0) f.cfg.epochs = finetune_epochs;
    std::printf("lambda %g: finetune (%d epochs)\n", lambda, f.cfg.epochs);
    auto ft = run_stage(f.cfg, d.train, &*d.val, sp.params, &sp.mask);

    const auto rep = sparsity_report(ft.best_params.topo, part, sp.mask);
    const auto scores =
        score_trials(embed_all(ft.best_params, *d.val), d.val->trials);
    csv.precision(10);
    csv << lambda << ',' << to_string(a.cfg.granularity) << ','
        << rep.nonzero_params;
    for (const auto& l : rep.layers) csv << ',' << l.fraction;
    csv << ',' << eer(scores) << ',' << min_dcf(scores) << '\n';
  }
  const std::string text = csv.str();
  std::printf("%s", text.c_str());
  if (!csv_out.empty()) {
    std::ofstream out(csv_out, std::ios::trunc);
    if (!out) throw Error("cannot write " + csv_out);
    out << text;
    std::printf("sweep CSV -> %s\n", csv_out.c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// export / embed / score / eval

int run_export(const std::string& model_path, const std::string& mask_path,
               const std::string& scheme_name, const std::string& out,
               bool dense_layout) {
  const ModelParams p = read_model_file(model_path);
  const QuantScheme scheme = parse_scheme(scheme_name);
  SparsityMask mask;
  if (!mask_path.empty()) {
    mask = read_mask_file(mask_path);
  } else {
    mask = empty_mask(build_groups(p.topo, Granularity::Chunk8));
  }
  const auto part = build_groups(p.topo, mask.granularity);
  const CompactModel cm = compact(p, part, mask);
  const PackedModel pm = quantize(cm, scheme, dense_layout);
  write_packed_file(out, pm);
  std::printf("packed %s (%s, %s%s) -> %s, %lld bytes\n", model_path.c_str(),
              to_string(scheme).c_str(), to_string(mask.granularity).c_str(),
              dense_layout ? ", dense layout" : "", out.c_str(),
              static_cast<long long>(fs::file_size(out)));
  return 0;
}

int run_embed(const std::vector<std::string>& inputs, const std::string& model_path,
              const std::string& packed_path, const std::string& out) {
  if (model_path.empty() == packed_path.empty())
    throw Error("embed: pass exactly one of --model or --packed");
  std::optional<ModelParams> dense;
  std::optional<PackedModel> packed;
  if (!model_path.empty())
    dense = read_model_file(model_path);
  else
    packed = read_packed_file(packed_path);

  EmbeddingMap embs;
  for (const auto& path : inputs) {
    const FeatureMatrix fm = read_feature_file(path);
    const std::string id = fs::path(path).stem().string();
    if (!embs.emplace(id, dense ? embed(*dense, fm) : sparse_infer(*packed, fm))
             .second)
      throw Error("embed: duplicate utterance id " + id);
  }
  write_embeddings_file(out, embs);
  std::printf("embedded %zu utterances -> %s\n", embs.size(), out.c_str());
  return 0;
}

int run_score(const std::string& emb_path, const std::string& trials_path,
              const std::string& out) {
  const EmbeddingMap embs = read_embeddings_file(emb_path);
  const TrialList trials = read_trials_file(trials_path);
  const ScoreSet scores = score_trials(embs, trials);
  const std::string text = format_scores(trials, scores.score);
  if (out.empty()) {
    std::printf("%s", text.c_str());
  } else {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw Error("cannot write " + out);
    f << text;
    std::printf("scored %zu trials -> %s\n", trials.size(), out.c_str());
  }
  return 0;
}

int run_eval(const std::string& scores_path, const std::string& emb_path,
             const std::string& trials_path, double p_target) {
  ScoreSet s;
  if (!scores_path.empty()) {
    auto bytes = read_file(scores_path);
    s = parse_scored(std::string(bytes.begin(), bytes.end()));
  } else if (!emb_path.empty() && !trials_path.empty()) {
    s = score_trials(read_embeddings_file(emb_path),
                     read_trials_file(trials_path));
  } else {
    throw Error("eval: pass --scores, or --embeddings with --trials");
  }
  std::printf("trials=%zu eer_pct=%.6f min_dcf=%.6f\n", s.size(), eer(s),
              min_dcf(s, p_target));
  return 0;
}

// ---------------------------------------------------------------------------
// trials

std::vector<std::pair<std::string, std::string>> load_labels(
    const std::string& dir) {
  std::ifstream labels(fs::path(dir) / "labels.tsv");
  if (!labels) throw Error("cannot open " + dir + "/labels.tsv");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError("labels.tsv: expected <path>\\t<speaker>: " + line);
    out.emplace_back(fs::path(line.substr(0, tab)).stem().string(),
                     "spk" + line.substr(tab + 1));
  }
  return out;
}

int run_trials(const std::string& data_dir, const std::string& out, int targets,
               int nontargets, uint64_t seed) {
  const auto labels = load_labels(data_dir);
  const TrialList trials = sample_trials(labels, targets, nontargets, seed);
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw Error("cannot write " + out);
  for (const auto& t : trials)
    f << t.enroll << ' ' << t.test << ' '
      << (t.target ? "target" : "nontarget") << '\n';
  std::printf("wrote %zu trials (%d target, %d nontarget) -> %s\n",
              trials.size(), targets, nontargets, out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bench

int run_bench(const std::string& sparse_path, const std::string& dense_path,
              int frames, int repeats, uint64_t seed, const std::string& csv_out) {
  const PackedModel sparse = read_packed_file(sparse_path);
  const PackedModel dense = read_packed_file(dense_path);
  if (frames < sparse.min_frames())
    throw Error("bench: --frames below the receptive field");

  FeatureMatrix fm;
  fm.frames.resize(frames, sparse.feat_dim);
  Rng rng(mix_seed(seed, 0xBE7C));
  for (int t = 0; t < frames; ++t)
    for (int dch = 0; dch < sparse.feat_dim; ++dch)
      fm.frames(t, dch) = static_cast<float>(rng.gauss());

  const BenchResult r = benchmark(sparse, dense, fm, repeats);
  const double sparsity =
      1.0 - static_cast<double>(r.sparse_macs) / static_cast<double>(r.dense_macs);
  std::ostringstream csv;
  csv << "model,sparsity,dense_macs,sparse_macs,ns_dense,ns_sparse,speedup\n";
  csv.precision(6);
  csv << fs::path(sparse_path).stem().string() << ',' << sparsity << ','
      << r.dense_macs << ',' << r.sparse_macs << ',' << r.wall_ns_dense << ','
      << r.wall_ns_sparse << ',' << r.speedup << '\n';
  std::printf("%s", csv.str().c_str());
  if (!csv_out.empty()) {
    std::ofstream f(csv_out, std::ios::trunc);
    if (!f) throw Error("cannot write " + csv_out);
    f << csv.str();
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report

std::vector<std::vector<std::string>> parse_csv(const std::string& path) {
  auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

void write_scatter_svg(const std::string& path,
                       const std::vector<std::array<double, 2>>& xy,
                       const std::vector<std::string>& labels) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& p : xy) {
    xmin = std::min(xmin, p[0]);
    xmax = std::max(xmax, p[0]);
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  const double W = 640, H = 440, L = 80, B = 60, T = 20, R = 30;
  auto X = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto Y = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
    << H << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  f << "<line x1='" << L << "' y1='" << H - B << "' x2='" << W - R << "' y2='"
    << H - B << "' stroke='black'/>\n";
  f << "<line x1='" << L << "' y1='" << T << "' x2='" << L << "' y2='" << H - B
    << "' stroke='black'/>\n";
  f << "<text x='" << (L + W - R) / 2 << "' y='" << H - 15
    << "' text-anchor='middle' font-size='14'>nonzero parameters</text>\n";
  f << "<text x='18' y='" << (T + H - B) / 2
    << "' text-anchor='middle' font-size='14' transform='rotate(-90 18 "
    << (T + H - B) / 2 << ")'>EER %</text>\n";
  f.precision(6);
  for (double fr : {0.0, 0.5, 1.0}) {
    const double xv = xmin + fr * (xmax - xmin);
    const double yv = ymin + fr * (ymax - ymin);
    f << "<text x='" << X(xv) << "' y='" << H - B + 18
      << "' text-anchor='middle' font-size='11'>" << xv << "</text>\n";
    f << "<text x='" << L - 8 << "' y='" << Y(yv) + 4
      << "' text-anchor='end' font-size='11'>" << yv << "</text>\n";
  }
  for (size_t i = 0; i < xy.size(); ++i) {
    f << "<circle cx='" << X(xy[i][0]) << "' cy='" << Y(xy[i][1])
      << "' r='5' fill='steelblue'/>\n";
    f << "<text x='" << X(xy[i][0]) + 8 << "' y='" << Y(xy[i][1]) - 6
      << "' font-size='11'>" << labels[i] << "</text>\n";
  }
  f << "</svg>\n";
}

int run_report(const std::string& sweep_csv, const std::string& svg_out) {
  const auto rows = parse_csv(sweep_csv);
  if (rows.size() < 2) throw Error("report: sweep CSV has no data rows");
  const auto& header = rows[0];
  auto col = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw Error("report: sweep CSV lacks column " + name);
  };
  const size_t c_lambda = col("lambda"), c_params = col("nonzero_params");
  const size_t c_eer = col("eer"), c_dcf = col("min_dcf");

  std::printf("%10s %14s %10s %10s\n", "lambda", "nonzero", "EER%", "minDCF");
  std::vector<std::array<double, 2>> xy;
  std::vector<std::string> labels;
  for (size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    std::printf("%10s %14s %10s %10s\n", row[c_lambda].c_str(),
                row[c_params].c_str(), row[c_eer].c_str(), row[c_dcf].c_str());
    xy.push_back({std::stod(row[c_params]), std::stod(row[c_eer])});
    labels.push_back("lambda=" + row[c_lambda]);
  }
  if (!svg_out.empty()) {
    write_scatter_svg(svg_out, xy, labels);
    std::printf("scatter -> %s\n", svg_out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparsevox: compact sparse speaker-embedding pipeline"};
  app.require_subcommand(1);
  app.set_config("--config")->description("read defaults from a key = value file");
  app.allow_config_extras(false);

  FeaturesArgs feat;
  auto* cmd_features =
      app.add_subcommand("features", "extract log-mel features from WAV files");
  cmd_features->add_option("wavs", feat.wavs, "input WAV files (PCM16 mono)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_features->add_option("--out", feat.out, "output file (single input) or directory")
      ->required();
  cmd_features->add_option("--cmn-window", feat.cmn_window, "CMN window, seconds");
  cmd_features->add_flag("--no-cmn", feat.no_cmn, "skip sliding mean normalization");
  cmd_features->add_option("--n-mels", feat.n_mels, "mel filterbank size");

  SynthConfig synth_cfg;
  std::string synth_out;
  auto* cmd_synth =
      app.add_subcommand("synth", "generate a deterministic synthetic speaker dataset");
  cmd_synth->add_option("--out-dir", synth_out, "output dataset directory")->required();
  cmd_synth->add_option("--speakers", synth_cfg.n_speakers, "number of speakers");
  cmd_synth->add_option("--utts", synth_cfg.utts_per_speaker, "utterances per speaker");
  cmd_synth->add_option("--min-frames", synth_cfg.min_frames, "min frames per utterance");
  cmd_synth->add_option("--max-frames", synth_cfg.max_frames, "max frames per utterance");
  cmd_synth->add_option("--seed", synth_cfg.seed, "dataset seed");
  cmd_synth->add_option("--noise", synth_cfg.intra_speaker_noise,
                        "intra-speaker mean jitter");

  TrainArgs base_args;
  auto* cmd_base = app.add_subcommand("train-baseline",
                                      "stage 1: train the dense baseline");
  add_train_options(cmd_base, base_args, /*lr_defaults_desk=*/true);

  TrainArgs sp_args;
  std::string sp_init, sp_mask_out;
  auto* cmd_sparsify = app.add_subcommand(
      "sparsify", "stage 2: train with group Lasso, then threshold a mask");
  add_train_options(cmd_sparsify, sp_args, true);
  cmd_sparsify->add_option("--init", sp_init, "baseline checkpoint")->required();
  cmd_sparsify->add_option("--lambda", sp_args.cfg.lambda, "group Lasso weight")
      ->required();
  cmd_sparsify
      ->add_option("--granularity", [&sp_args](const std::vector<std::string>& v) {
        sp_args.cfg.granularity = parse_granularity(v[0]);
        return true;
      }, "filter | chunk8 | chunk16")
      ->expected(1);
  cmd_sparsify->add_option("--tau", sp_args.cfg.tau_abs,
                           "threshold: zero groups with norm < tau*sqrt(len)");
  cmd_sparsify->add_option("--mask-out", sp_mask_out,
                           "mask sidecar path (default <out>.mask)");

  TrainArgs ft_args;
  std::string ft_init, ft_mask;
  auto* cmd_finetune = app.add_subcommand(
      "finetune", "stage 3: retrain with the mask frozen, data term only");
  add_train_options(cmd_finetune, ft_args, true);
  cmd_finetune->add_option("--init", ft_init, "sparsified checkpoint")->required();
  cmd_finetune->add_option("--mask", ft_mask, "mask sidecar from sparsify")
      ->required();

  TrainArgs sw_args;
  std::vector<double> sw_lambdas;
  std::string sw_baseline, sw_csv;
  int sw_sp_epochs = 0, sw_ft_epochs = 0;
  auto* cmd_sweep = app.add_subcommand(
      "sweep", "run sparsify+finetune across lambdas, one CSV row each");
  add_train_options(cmd_sweep, sw_args, true);
  cmd_sweep->add_option("--lambdas", sw_lambdas, "comma-separated lambda grid")
      ->required()
      ->delimiter(',');
  cmd_sweep
      ->add_option("--granularity", [&sw_args](const std::vector<std::string>& v) {
        sw_args.cfg.granularity = parse_granularity(v[0]);
        return true;
      }, "filter | chunk8 | chunk16")
      ->expected(1);
  cmd_sweep->add_option("--tau", sw_args.cfg.tau_abs, "mask threshold");
  cmd_sweep->add_option("--baseline", sw_baseline,
                        "reuse this baseline checkpoint instead of training one");
  cmd_sweep->add_option("--sparsify-epochs", sw_sp_epochs,
                        "override epochs for stage 2");
  cmd_sweep->add_option("--finetune-epochs", sw_ft_epochs,
                        "override epochs for stage 3");
  cmd_sweep->add_option("--csv", sw_csv, "write the sweep table here");

  std::string ex_model, ex_mask, ex_scheme = "int16c8", ex_out;
  bool ex_dense = false;
  auto* cmd_export =
      app.add_subcommand("export", "quantize a checkpoint into a packed model");
  cmd_export->add_option("--model", ex_model, "checkpoint path")->required();
  cmd_export->add_option("--mask", ex_mask, "mask sidecar (optional)");
  cmd_export->add_option("--scheme", ex_scheme, "int16c8 | int8c16");
  cmd_export->add_option("--out", ex_out, "packed model path")->required();
  cmd_export->add_flag("--dense-layout", ex_dense,
                       "keep every chunk resident (benchmark reference)");

  std::vector<std::string> em_inputs;
  std::string em_model, em_packed, em_out;
  auto* cmd_embed = app.add_subcommand("embed", "compute utterance embeddings");
  cmd_embed->add_option("features", em_inputs, ".ftmx feature files")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_embed->add_option("--model", em_model, "dense checkpoint");
  cmd_embed->add_option("--packed", em_packed, "packed model (chunk-skipping path)");
  cmd_embed->add_option("--out", em_out, "embeddings file")->required();

  std::string sc_embs, sc_trials, sc_out;
  auto* cmd_score = app.add_subcommand("score", "cosine-score a trial list");
  cmd_score->add_option("--embeddings", sc_embs, "embeddings file")->required();
  cmd_score->add_option("--trials", sc_trials, "trial list")->required();
  cmd_score->add_option("--out", sc_out, "scored trials (default stdout)");

  std::string ev_scores, ev_embs, ev_trials;
  double ev_ptarget = 0.01;
  auto* cmd_eval = app.add_subcommand("eval", "EER and minDCF of scored trials");
  cmd_eval->add_option("--scores", ev_scores, "scored trial file");
  cmd_eval->add_option("--embeddings", ev_embs, "embeddings file");
  cmd_eval->add_option("--trials", ev_trials, "trial list");
  cmd_eval->add_option("--p-target", ev_ptarget, "DCF target prior");

  std::string tr_data, tr_out;
  int tr_targets = 1000, tr_nontargets = 1000;
  uint64_t tr_seed = 1;
  auto* cmd_trials =
      app.add_subcommand("trials", "sample a verification protocol from a dataset");
  cmd_trials->add_option("--data", tr_data, "dataset directory")->required();
  cmd_trials->add_option("--out", tr_out, "trial list path")->required();
  cmd_trials->add_option("--targets", tr_targets, "number of target trials");
  cmd_trials->add_option("--nontargets", tr_nontargets, "number of nontarget trials");
  cmd_trials->add_option("--seed", tr_seed, "sampling seed");

  std::string bn_sparse, bn_dense, bn_csv;
  int bn_frames = 300, bn_repeats = 30;
  uint64_t bn_seed = 1;
  auto* cmd_bench = app.add_subcommand(
      "bench", "time the chunk-skipping kernel against a dense-layout reference");
  cmd_bench->add_option("--packed", bn_sparse, "sparse packed model")->required();
  cmd_bench->add_option("--dense", bn_dense, "dense-layout packed model")->required();
  cmd_bench->add_option("--frames", bn_frames, "input frames");
  cmd_bench->add_option("--repeats", bn_repeats, "timing repeats (median)");
  cmd_bench->add_option("--seed", bn_seed, "input features seed");
  cmd_bench->add_option("--csv", bn_csv, "write the result row here");

  std::string rp_csv, rp_svg;
  auto* cmd_report =
      app.add_subcommand("report", "summarize a sweep CSV, optional SVG scatter");
  cmd_report->add_option("--sweep-csv", rp_csv, "CSV from the sweep subcommand")
      ->required();
  cmd_report->add_option("--svg", rp_svg, "write an EER vs params scatter here");

  try {
    app.parse(argc, argv);
    if (cmd_features->parsed()) return run_features(feat);
    if (cmd_synth->parsed()) return run_synth(synth_cfg, synth_out);
    if (cmd_base->parsed()) return run_train_baseline(base_args);
    if (cmd_sparsify->parsed()) return run_sparsify(sp_args, sp_init, sp_mask_out);
    if (cmd_finetune->parsed()) return run_finetune(ft_args, ft_init, ft_mask);
    if (cmd_sweep->parsed())
      return run_sweep(sw_args, sw_lambdas, sw_baseline, sw_sp_epochs,
                       sw_ft_epochs, sw_csv);
    if (cmd_export->parsed())
      return run_export(ex_model, ex_mask, ex_scheme, ex_out, ex_dense);
    if (cmd_embed->parsed()) return run_embed(em_inputs, em_model, em_packed, em_out);
    if (cmd_score->parsed()) return run_score(sc_embs, sc_trials, sc_out);
    if (cmd_eval->parsed()) return run_eval(ev_scores, ev_embs, ev_trials, ev_ptarget);
    if (cmd_trials->parsed())
      return run_trials(tr_data, tr_out, tr_targets, tr_nontargets, tr_seed);
    if (cmd_bench->parsed())
      return run_bench(bn_sparse, bn_dense, bn_frames, bn_repeats, bn_seed, bn_csv);
    if (cmd_report->parsed()) return run_report(rp_csv, rp_svg);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
