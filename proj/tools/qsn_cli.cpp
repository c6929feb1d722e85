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

// qsn: command-line driver for corpus generation, featurization, training,
// evaluation and single-file scoring.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qsn/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<uint64_t> seed;
  std::string manifest;
  std::string audio_root;
  std::string cache_dir;
  std::string checkpoint;
  std::string report_dir;
  std::string rule;
  std::optional<double> threshold;
  std::optional<int> jobs;
  bool deterministic = false;
};

// defaults <- recorded run config (if any) <- config file <- flags
qsn::RunConfig BuildConfig(const Overrides& o, const json& recorded = {}) {
  json merged = qsn::RunConfig{};
  if (recorded.is_object()) merged.merge_patch(recorded);
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) qsn::Fail(qsn::ErrorCode::kIoError, o.config + ": cannot open config");
    try {
      merged.merge_patch(json::parse(in));
    } catch (const json::parse_error& e) {
      qsn::Fail(qsn::ErrorCode::kInvalidConfig, o.config + ": " + e.what());
    }
  }
  qsn::RunConfig cfg;
  try {
    cfg = merged.get<qsn::RunConfig>();
  } catch (const json::exception& e) {
    qsn::Fail(qsn::ErrorCode::kInvalidConfig, e.what());
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.manifest.empty()) cfg.paths.manifest = o.manifest;
  if (!o.audio_root.empty()) cfg.paths.audio_root = o.audio_root;
  if (!o.cache_dir.empty()) cfg.paths.cache_dir = o.cache_dir;
  if (!o.checkpoint.empty()) cfg.paths.checkpoint = o.checkpoint;
  if (!o.report_dir.empty()) cfg.paths.report_dir = o.report_dir;
  if (!o.rule.empty()) cfg.rule = o.rule == "threshold" ? qsn::DecisionRule::kThreshold : qsn::DecisionRule::kNearest;
  if (o.threshold) cfg.threshold = *o.threshold;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.deterministic) cfg.deterministic = true;
  if (cfg.paths.cache_dir.empty()) {
    if (const char* env = std::getenv("QSN_CACHE_DIR"); env && *env) {
      cfg.paths.cache_dir = env;
    } else if (!cfg.paths.manifest.empty()) {
      cfg.paths.cache_dir = (fs::path(cfg.paths.manifest).parent_path() / "cache").string();
    }
  }
  qsn::Finalize(cfg);
  return cfg;
}

qsn::Manifest LoadManifest(const qsn::RunConfig& cfg) {
  if (cfg.paths.manifest.empty()) qsn::Fail(qsn::ErrorCode::kInvalidConfig, "--manifest is required");
  const fs::path path = cfg.paths.manifest;
  if (path.extension() == ".csv") return qsn::ReadManifestFile(path);
  // Anything else is read as a whitespace-separated protocol file.
  const fs::path root = cfg.paths.audio_root.empty() ? path.parent_path() : fs::path(cfg.paths.audio_root);
  return qsn::ParseProtocolFile(path, root, cfg.audio_extension);
}

fs::path Sibling(const fs::path& artifact, const std::string& suffix) {
  fs::path p = artifact;
  p.replace_extension(suffix);
  return p;
}

fs::path CheckpointPath(const qsn::RunConfig& cfg) {
  return cfg.paths.checkpoint.empty() ? fs::path("model.qsnm") : fs::path(cfg.paths.checkpoint);
}

json RecordedConfig(const qsn::Model& model) {
  return model.metadata.contains("run_config") ? model.metadata["run_config"] : json();
}

int CmdGenToy(const qsn::ToySpec& spec, const std::string& out_dir, int jobs) {
  const qsn::Manifest m = qsn::GenerateToyCorpus(spec, out_dir, jobs);
  std::cout << (fs::path(out_dir) / "manifest.csv").string() << '\n';
  std::cerr << "generated " << m.utterances.size() << " utterances\n";
  return qsn::kExitOk;
}

int CmdFeaturize(const Overrides& o) {
  const qsn::RunConfig cfg = BuildConfig(o);
  const qsn::Manifest m = LoadManifest(cfg);
  const auto summary = qsn::Featurize(m, cfg.prep, cfg.spectral, cfg.paths.cache_dir, cfg.jobs);
  qsn::WriteJson(fs::path(cfg.paths.cache_dir) / "run_config.json", cfg);
  for (const auto& [id, msg] : summary.failures) std::cerr << "failed " << id << ": " << msg << '\n';
  std::cout << "computed " << summary.computed << ", cached " << summary.cached << ", failed "
            << summary.failures.size() << '\n';
  return summary.failures.empty() ? qsn::kExitOk : qsn::kExitData;
}

int CmdTrain(const Overrides& o) {
  const qsn::RunConfig cfg = BuildConfig(o);
  const qsn::Manifest m = LoadManifest(cfg);
  const fs::path ckpt = CheckpointPath(cfg);
  if (ckpt.has_parent_path()) qsn::EnsureDir(ckpt.parent_path());
  const fs::path log_path = Sibling(ckpt, ".train.csv");
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) qsn::Fail(qsn::ErrorCode::kIoError, log_path.string() + ": cannot open for writing");
  log << "step,lr,loss\n";
  const qsn::Model model = qsn::Train(m, cfg, [&](const qsn::TrainLogRow& row) {
    log << qsn::FormatLogRow(row) << '\n';
    if (row.step % 100 == 0) std::cerr << "step " << row.step << " loss " << row.loss << '\n';
  });
  log.flush();
  if (!log) qsn::Fail(qsn::ErrorCode::kIoError, log_path.string() + ": write failed");
  qsn::SaveCheckpoint(model, ckpt);
  qsn::WriteJson(Sibling(ckpt, ".config.json"), cfg);
  std::cout << ckpt.string() << '\n';
  return qsn::kExitOk;
}

int CmdEvaluate(const Overrides& o) {
  const qsn::RunConfig probe = BuildConfig(o);
  qsn::Model model = qsn::LoadCheckpoint(CheckpointPath(probe));
  qsn::RunConfig cfg = BuildConfig(o, RecordedConfig(model));
  if (cfg.paths.report_dir.empty()) cfg.paths.report_dir = "report";
  const qsn::Manifest m = LoadManifest(cfg);
  const qsn::EvalOutputs eval = qsn::EvaluateRun(model, m, cfg);
  if (eval.records.empty()) qsn::Fail(qsn::ErrorCode::kEmptyRecords, "query split is empty");
  qsn::WriteEvalOutputs(eval, cfg, cfg.paths.report_dir);
  const auto& g = eval.report.global;
  std::printf("accuracy %.4f eer %.4f queries %zu\n", g.metrics.accuracy, g.eer.value_or(-1.0),
              eval.records.size());
  return qsn::kExitOk;
}

int CmdScore(const Overrides& o, const std::string& wav, const std::string& support_path) {
  const qsn::RunConfig probe = BuildConfig(o);
  qsn::Model model = qsn::LoadCheckpoint(CheckpointPath(probe));
  const qsn::RunConfig cfg = BuildConfig(o, RecordedConfig(model));
  qsn::Manifest support;
  if (!support_path.empty()) {
    support = qsn::ReadManifestFile(support_path);
  } else {
    // Without an explicit support manifest, rebuild the training-time split.
    support.utterances = qsn::SplitDataset(LoadManifest(cfg).utterances, cfg.split, cfg.seed, cfg.support_mode).support;
  }
  if (!fs::exists(wav)) qsn::Fail(qsn::ErrorCode::kIoError, wav + ": no such file");
  const qsn::ScoreResult r = qsn::ScoreFile(model, wav, support, cfg.rule, cfg.threshold, cfg.ties_to_bonafide);
  std::printf("%s\t%.9g\t%s\n", r.utt_id.c_str(), r.decision.score,
              std::string(qsn::LabelName(r.decision.label)).c_str());
  return r.decision.label == qsn::Label::kSpoof ? qsn::kExitSpoof : qsn::kExitOk;
}

int CmdValidate(const Overrides& o) {
  const qsn::RunConfig cfg = BuildConfig(o);
  const qsn::Manifest m = LoadManifest(cfg);
  const fs::path cache = o.cache_dir.empty() ? fs::path() : fs::path(cfg.paths.cache_dir);
  const qsn::ValidationReport report = qsn::ValidateManifest(m, cache);
  for (const auto& w : report.warnings) std::cout << "warning: " << w << '\n';
  for (const auto& e : report.errors) std::cout << "error: " << e << '\n';
  std::cout << m.utterances.size() << " utterances, " << report.errors.size() << " errors, "
            << report.warnings.size() << " warnings\n";
  return report.errors.empty() ? qsn::kExitOk : qsn::kExitData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot metric-learning audio anti-spoofing"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  app.add_option("--config", o.config, "JSON run configuration");
  app.add_option("--seed", o.seed, "Master seed");
  app.add_option("--manifest", o.manifest, "Manifest CSV or protocol file");
  app.add_option("--audio-root", o.audio_root, "Audio directory for protocol files");
  app.add_option("--cache-dir", o.cache_dir, "Feature cache directory (default $QSN_CACHE_DIR)");
  app.add_option("--checkpoint", o.checkpoint, "Model checkpoint path");
  app.add_option("--report-dir", o.report_dir, "Evaluation output directory");
  app.add_option("--rule", o.rule, "Decision rule")->check(CLI::IsMember({"nearest", "threshold"}));
  app.add_option("--threshold", o.threshold, "Distance threshold for the threshold rule");
  app.add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", o.deterministic, "Record the determinism requirement in the run config");

  qsn::ToySpec spec;
  std::string toy_out = "toy";
  std::string attacks = "S1,S2,S3";
  auto* gen = app.add_subcommand("gen-toy", "Generate the synthetic toy corpus");
  gen->add_option("--out", toy_out, "Output directory");
  gen->add_option("--speakers", spec.n_speakers, "Number of pseudo-speakers");
  gen->add_option("--utts", spec.utts_per_speaker_per_class, "Utterances per speaker and class");
  gen->add_option("--attacks", attacks, "Comma-separated subset of S1,S2,S3");
  gen->add_option("--duration", spec.duration, "Seconds per utterance");
  gen->add_option("--snr", spec.noise_snr_db, "Additive noise SNR in dB");
  gen->add_option("--f0-min", spec.f0_min, "Lowest speaker f0 in Hz");
  gen->add_option("--f0-max", spec.f0_max, "Highest speaker f0 in Hz");

  auto* featurize = app.add_subcommand("featurize", "Extract and cache features");
  auto* train = app.add_subcommand("train", "Train the embedder");
  auto* evaluate = app.add_subcommand("evaluate", "Episodic evaluation and reports");

  std::string wav, support;
  auto* score = app.add_subcommand("score", "Score a single WAV file");
  score->add_option("wav", wav, "Audio file to score")->required();
  score->add_option("--support", support, "Support manifest CSV (default: support split of --manifest)");

  auto* validate = app.add_subcommand("validate", "Check a manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? qsn::kExitOk : qsn::kExitUsage;
  }

  try {
    if (*gen) {
      if (o.seed) spec.seed = *o.seed;
      spec.attacks.clear();
      std::stringstream ss(attacks);
      for (std::string a; std::getline(ss, a, ',');) {
        if (!a.empty()) spec.attacks.push_back(a);
      }
      return CmdGenToy(spec, toy_out, o.jobs.value_or(1));
    }
    if (*featurize) return CmdFeaturize(o);
    if (*train) return CmdTrain(o);
    if (*evaluate) return CmdEvaluate(o);
    if (*score) return CmdScore(o, wav, support);
    if (*validate) return CmdValidate(o);
  } catch (const qsn::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return qsn::ExitCodeFor(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return qsn::kExitIo;
  }
  return qsn::kExitUsage;
}
