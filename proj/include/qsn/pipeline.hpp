// Copyright 2026 The qsn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end run wiring used by the command-line tool: unified run
// configuration, feature caching, training, evaluation and single-file
// scoring.

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsn/checkpoint.hpp"
#include "qsn/config_json.hpp"
#include "qsn/corpus.hpp"
#include "qsn/episodic.hpp"
#include "qsn/error.hpp"
#include "qsn/metrics.hpp"
#include "qsn/network.hpp"
#include "qsn/nn.hpp"
#include "qsn/signal_prep.hpp"
#include "qsn/spectral.hpp"

namespace qsn {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitRatios, train, support, query)

NLOHMANN_JSON_SERIALIZE_ENUM(SupportMode, {{SupportMode::kPerClass, "per_class"},
                                          {SupportMode::kPerAttack, "per_attack"}})
NLOHMANN_JSON_SERIALIZE_ENUM(TripletStrategy, {{TripletStrategy::kRandom, "random"},
                                              {TripletStrategy::kSemiHard, "semi-hard"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DecisionRule, {{DecisionRule::kNearest, "nearest"},
                                           {DecisionRule::kThreshold, "threshold"}})

struct RunPaths {
  std::string manifest;
  std::string audio_root;
  std::string cache_dir;
  std::string checkpoint;
  std::string report_dir;
  bool operator==(const RunPaths&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunPaths, manifest, audio_root, cache_dir, checkpoint,
                                                report_dir)

struct RunConfig {
  PrepConfig prep;
  SpectralConfig spectral;
  nn::TrainConfig train;
  Architecture architecture;
  SplitRatios split;
  SupportMode support_mode = SupportMode::kPerClass;
  TripletStrategy triplets = TripletStrategy::kRandom;
  DecisionRule rule = DecisionRule::kNearest;
  double threshold = kDefaultThreshold;
  bool ties_to_bonafide = true;
  std::string audio_extension = ".wav";
  RunPaths paths;
  uint64_t seed = 7;
  int jobs = 1;
  bool deterministic = true;
  bool operator==(const RunConfig&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, prep, spectral, train, architecture, split,
                                                support_mode, triplets, rule, threshold,
                                                ties_to_bonafide, audio_extension, paths, seed, jobs,
                                                deterministic)

/// Checks every sub-config and their mutual consistency; mirrors the run
/// seed into the training config.
inline void Finalize(RunConfig& cfg) {
  cfg.train.seed = cfg.seed;
  Validate(cfg.prep);
  Validate(cfg.spectral);
  nn::Validate(cfg.train);
  if (static_cast<size_t>(cfg.spectral.clip_samples) != cfg.prep.TargetLength() ||
      cfg.spectral.sample_rate != cfg.prep.target_rate) {
    Fail(ErrorCode::kInvalidConfig, "spectral clip geometry does not match the preprocessing output");
  }
  if (cfg.architecture.input_dim != cfg.spectral.FeatureRows()) {
    Fail(ErrorCode::kInvalidConfig, "architecture input_dim must equal the feature row count");
  }
  if (cfg.jobs < 1) cfg.jobs = 1;
}

inline RunConfig LoadRunConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIoError, path.string() + ": cannot open config");
  try {
    return nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
}

inline void WriteJson(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": write failed");
}

inline std::filesystem::path EnsureDir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) Fail(ErrorCode::kIoError, dir.string() + ": " + ec.message());
  return dir;
}

// ---- Exit codes -------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitSpoof = 3;
inline constexpr int kExitModel = 4;
inline constexpr int kExitAudio = 5;
inline constexpr int kExitData = 6;

/// Process exit status for a library error. Files that cannot be opened
/// count as I/O; decodable-but-unusable audio counts as an audio error.
inline int ExitCodeFor(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIoError:
    case ErrorCode::kUnreadableFile:
    case ErrorCode::kCorruptFeatureFile:
      return kExitIo;
    case ErrorCode::kUnsupportedEncoding:
    case ErrorCode::kEmptyAudio:
    case ErrorCode::kAllSilent:
    case ErrorCode::kAllZero:
    case ErrorCode::kWrongLength:
      return kExitAudio;
    case ErrorCode::kCorruptCheckpoint:
    case ErrorCode::kModelNotLoaded:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kLengthMismatch:
    case ErrorCode::kNonFiniteGradient:
    case ErrorCode::kNoForwardRecorded:
    case ErrorCode::kBatchTooSmall:
      return kExitModel;
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kInvalidBand:
      return kExitUsage;
    default:
      return kExitData;
  }
}

// ---- Features ---------------------------------------------------------------

/// Raw (unstandardized) features of one audio file.
inline Eigen::MatrixXd RawFeaturesFromFile(const std::filesystem::path& wav_path, const PrepConfig& prep,
                                           const SpectralConfig& spectral) {
  return ExtractRawFeatures(Preprocess(LoadAudio(wav_path, prep), prep), spectral);
}

inline std::filesystem::path FeaturePath(const std::filesystem::path& cache_dir, const std::string& utt_id) {
  return cache_dir / (utt_id + ".qsfm");
}

inline nlohmann::json FeatureFingerprint(const PrepConfig& prep, const SpectralConfig& spectral) {
  return {{"prep", prep}, {"spectral", spectral}, {"format_version", kFeatureVersion}};
}

struct FeaturizeSummary {
  long computed = 0;
  long cached = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // utt id, message
};

/// Extracts raw features for every utterance into cache_dir/<id>.qsfm.
/// Entries newer than their audio and produced with the same configuration
/// are skipped. Per-file failures are collected, not thrown.
inline FeaturizeSummary Featurize(const Manifest& manifest, const PrepConfig& prep,
                                  const SpectralConfig& spectral, const std::filesystem::path& cache_dir,
                                  int jobs = 1) {
  EnsureDir(cache_dir);
  const auto fingerprint_path = cache_dir / "features.json";
  const nlohmann::json fingerprint = FeatureFingerprint(prep, spectral);
  bool config_matches = false;
  if (std::filesystem::exists(fingerprint_path)) {
    std::ifstream in(fingerprint_path);
    try {
      config_matches = nlohmann::json::parse(in) == fingerprint;
    } catch (const nlohmann::json::exception&) {
      config_matches = false;
    }
  }
  if (!config_matches) WriteJson(fingerprint_path, fingerprint);

  const long n = static_cast<long>(manifest.utterances.size());
  std::vector<int> status(static_cast<size_t>(n), 0);  // 1 computed, 2 cached, 3 failed
  std::vector<std::string> messages(static_cast<size_t>(n));
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, jobs))
  for (long i = 0; i < n; ++i) {
    const Utterance& u = manifest.utterances[static_cast<size_t>(i)];
    const auto out = FeaturePath(cache_dir, u.id);
    try {
      std::error_code ec;
      if (config_matches && std::filesystem::exists(out) &&
          std::filesystem::last_write_time(out, ec) >= std::filesystem::last_write_time(u.path, ec) && !ec) {
        status[static_cast<size_t>(i)] = 2;
        continue;
      }
      const Eigen::MatrixXd raw = RawFeaturesFromFile(u.path, prep, spectral);
      WriteFeatureFile(out, raw.cast<float>());
      status[static_cast<size_t>(i)] = 1;
    } catch (const std::exception& e) {
      status[static_cast<size_t>(i)] = 3;
      messages[static_cast<size_t>(i)] = e.what();
    }
  }
  FeaturizeSummary summary;
  for (long i = 0; i < n; ++i) {
    switch (status[static_cast<size_t>(i)]) {
      case 1: ++summary.computed; break;
      case 2: ++summary.cached; break;
      default:
        summary.failures.emplace_back(manifest.utterances[static_cast<size_t>(i)].id,
                                      messages[static_cast<size_t>(i)]);
    }
  }
  return summary;
}

/// Loads cached raw features; falls back to extracting from audio when no
/// cache entry exists.
inline Eigen::MatrixXf LoadRawFeatures(const Utterance& u, const std::filesystem::path& cache_dir,
                                       const PrepConfig& prep, const SpectralConfig& spectral) {
  if (!cache_dir.empty()) {
    const auto p = FeaturePath(cache_dir, u.id);
    if (std::filesystem::exists(p)) {
      Eigen::MatrixXf m = ReadFeatureFile(p);
      if (m.rows() != spectral.FeatureRows() || m.cols() != spectral.Frames()) {
        Fail(ErrorCode::kCorruptFeatureFile, p.string() + ": unexpected shape");
      }
      return m;
    }
  }
  return RawFeaturesFromFile(u.path, prep, spectral).cast<float>();
}

inline Eigen::MatrixXf StandardizeF(const Eigen::MatrixXf& raw, const NormStats& stats) {
  return Standardize(raw.cast<double>(), stats).cast<float>();
}

// ---- Training ---------------------------------------------------------------

struct TrainLogRow {
  long step = 0;
  double lr = 0;
  double loss = 0;
};

inline std::string FormatLogRow(const TrainLogRow& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%ld,%.6g,%.9g", r.step, r.lr, r.loss);
  return buf;
}

inline nlohmann::json SplitMetadata(const EpisodeSplit& split) {
  auto speakers = [](const std::vector<Utterance>& v) {
    const auto s = SpeakerSet(v);
    return std::vector<std::string>(s.begin(), s.end());
  };
  std::vector<std::string> support_ids;
  for (const Utterance& u : split.support) support_ids.push_back(u.id);
  return {{"train_speakers", speakers(split.train)},
          {"support_speakers", speakers(split.support)},
          {"query_speakers", speakers(split.query)},
          {"support_utterances", support_ids}};
}

/// Splits the manifest, fits normalization statistics on the training
/// subset and optimizes the triplet objective for the configured number of
/// steps. `on_step` sees every logged step.
inline Model Train(const Manifest& manifest, RunConfig cfg,
                   const std::function<void(const TrainLogRow&)>& on_step = {}) {
  Finalize(cfg);
  const EpisodeSplit split = SplitDataset(manifest.utterances, cfg.split, cfg.seed, cfg.support_mode);
  const std::filesystem::path cache_dir = cfg.paths.cache_dir;

  std::vector<Eigen::MatrixXf> features(split.train.size());
  std::vector<std::string> errors(split.train.size());
  const long n_train = static_cast<long>(split.train.size());
#pragma omp parallel for schedule(dynamic) num_threads(cfg.jobs)
  for (long i = 0; i < n_train; ++i) {
    try {
      features[static_cast<size_t>(i)] =
          LoadRawFeatures(split.train[static_cast<size_t>(i)], cache_dir, cfg.prep, cfg.spectral);
    } catch (const std::exception& e) {
      errors[static_cast<size_t>(i)] = e.what();
    }
  }
  for (const std::string& e : errors) {
    if (!e.empty()) Fail(ErrorCode::kIoError, e);
  }
  NormStatsAccumulator acc;
  for (const auto& f : features) acc.Add(f.cast<double>());
  const NormStats stats = acc.Finish();
  for (auto& f : features) f = StandardizeF(f, stats);

  Model model;
  model.net = Network<float>::Initialized(cfg.architecture, cfg.seed);
  model.net.SetDropout(cfg.train.dropout_p);
  model.net.SetBatchNormMomentum(cfg.train.bn_momentum);
  model.net.SetThreads(cfg.jobs);
  model.norm = stats;
  model.train = cfg.train;
  model.spectral = cfg.spectral;
  model.prep = cfg.prep;

  long steps = cfg.train.max_steps;
  if (cfg.train.max_epochs > 0) {
    const long per_epoch = (n_train + cfg.train.batch_size - 1) / cfg.train.batch_size;
    steps = cfg.train.max_epochs * per_epoch;
  }
  nn::Rng rng(toy::SplitMix(cfg.seed ^ 0x7472616e73ull));
  nn::Adam<float> adam(cfg.train);
  const auto params = model.net.Params();
  const float alpha = static_cast<float>(cfg.train.margin_alpha);

  EmbedIndices embed_indices;
  if (cfg.triplets == TripletStrategy::kSemiHard) {
    embed_indices = [&](std::span<const size_t> idx) {
      std::vector<Eigen::MatrixXf> maps;
      for (size_t i : idx) maps.push_back(features[i]);
      return EmbedAll(model.net, maps);
    };
  }
  std::vector<const Eigen::MatrixXf*> a, p, n;
  for (long step = 0; step < steps; ++step) {
    const auto triplets = SampleTriplets(split.train, cfg.train.batch_size, cfg.triplets, rng, embed_indices,
                                         cfg.train.margin_alpha);
    a.clear();
    p.clear();
    n.clear();
    for (const Triplet& t : triplets) {
      a.push_back(&features[t.anchor]);
      p.push_back(&features[t.positive]);
      n.push_back(&features[t.negative]);
    }
    const auto out = model.net.ForwardTriplets(a, p, n, alpha, nn::Mode::kTrain, &rng);
    model.net.Backward();
    adam.Step(params, step);
    if (on_step) on_step({step, nn::LearningRate(cfg.train, step), static_cast<double>(out.mean_loss)});
  }
  model.step = steps;
  // Paths and thread count do not influence the weights; leaving them out
  // keeps checkpoints byte-identical across output locations.
  nlohmann::json recorded = cfg;
  recorded.erase("paths");
  recorded.erase("jobs");
  model.metadata = {{"run_config", recorded}, {"split", SplitMetadata(split)}};
  return model;
}

// ---- Evaluation -------------------------------------------------------------

/// Standardized eval-mode embeddings for a list of utterances.
inline Eigen::MatrixXf EmbedUtteranceList(Model& model, std::span<const Utterance> utts,
                                          const std::filesystem::path& cache_dir, int jobs) {
  std::vector<Eigen::MatrixXf> maps(utts.size());
  std::vector<std::string> errors(utts.size());
  const long n = static_cast<long>(utts.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, jobs))
  for (long i = 0; i < n; ++i) {
    try {
      maps[static_cast<size_t>(i)] = StandardizeF(
          LoadRawFeatures(utts[static_cast<size_t>(i)], cache_dir, model.prep, model.spectral), model.norm);
    } catch (const std::exception& e) {
      errors[static_cast<size_t>(i)] = e.what();
    }
  }
  for (const std::string& e : errors) {
    if (!e.empty()) Fail(ErrorCode::kIoError, e);
  }
  model.net.SetThreads(jobs);
  return EmbedAll(model.net, maps);
}

struct EvalOutputs {
  EpisodeSplit split;
  std::vector<QueryRecord> records;
  EvalReport report;
};

inline EvalOutputs EvaluateRun(Model& model, const Manifest& manifest, RunConfig cfg) {
  Finalize(cfg);
  EvalOutputs out;
  out.split = SplitDataset(manifest.utterances, cfg.split, cfg.seed, cfg.support_mode);
  const std::filesystem::path cache_dir = cfg.paths.cache_dir;
  out.records = Evaluate(
      out.split,
      [&](std::span<const Utterance> utts) { return EmbedUtteranceList(model, utts, cache_dir, cfg.jobs); },
      cfg.rule, cfg.threshold, cfg.ties_to_bonafide);
  if (!out.records.empty()) out.report = BuildReport(out.records);
  return out;
}

/// report.json, per_group.csv, queries.csv, det.csv and the effective
/// configuration.
inline void WriteEvalOutputs(const EvalOutputs& eval, const RunConfig& cfg, const std::filesystem::path& dir) {
  EnsureDir(dir);
  nlohmann::json report = ToJson(eval.report);
  report["rule"] = cfg.rule;
  report["threshold"] = cfg.threshold;
  report["seed"] = cfg.seed;
  WriteJson(dir / "report.json", report);
  auto write = [&](const std::string& name, const std::function<void(std::ostream&)>& fn) {
    std::ofstream os(dir / name, std::ios::trunc);
    if (!os) Fail(ErrorCode::kIoError, (dir / name).string() + ": cannot open for writing");
    fn(os);
  };
  write("per_group.csv", [&](std::ostream& os) { WritePerGroupCsv(os, eval.report); });
  write("queries.csv", [&](std::ostream& os) { WriteQueriesCsv(os, eval.records); });
  write("det.csv", [&](std::ostream& os) { WriteDetCsv(os, eval.report.det_points); });
  WriteJson(dir / "run_config.json", cfg);
}

// ---- Single-file scoring --------------------------------------------------------

struct ScoreResult {
  std::string utt_id;
  Decision decision;
};

/// Scores one audio file against the utterances of a support manifest.
/// Each file is featurized and embedded on its own, so a support file
/// scored against itself yields distance exactly 0.
inline ScoreResult ScoreFile(Model& model, const std::filesystem::path& wav_path, const Manifest& support,
                             DecisionRule rule, double threshold, bool ties_to_bonafide = true) {
  auto embed_file = [&](const std::filesystem::path& path) -> Eigen::VectorXf {
    const Eigen::MatrixXf features =
        StandardizeF(RawFeaturesFromFile(path, model.prep, model.spectral).cast<float>(), model.norm);
    return model.net.Embed(features, nn::Mode::kEval).col(0);
  };
  std::vector<SupportEntry> entries;
  for (const Utterance& u : support.utterances) entries.push_back({u.label, embed_file(u.path)});
  ScoreResult r;
  r.utt_id = wav_path.stem().string();
  r.decision = ClassifyQuery(embed_file(wav_path), entries, rule, threshold, ties_to_bonafide);
  return r;
}

}  // namespace qsn
