#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "patchsearch/config.hpp"
#include "patchsearch/encoder.hpp"
#include "patchsearch/manifest.hpp"

namespace patchsearch::pipeline {

/// Stages in execution order. "baseline" (a model trained on the unpoisoned
/// data) only runs when eval.clean_baseline is set.
const std::vector<std::string>& stage_names();

/// All module settings of one run, keyed by section ("search.w", "sieve.lr").
struct RunConfig {
  Config config;

  static RunConfig load(const std::filesystem::path& path);
  /// Small analytic world tuned for CPU: oracle encoder, motif side 8, w = 8.
  static RunConfig oracle_defaults();

  /// PATCHSEARCH_ARTIFACTS/<run.name> when the variable is set, else run.dir.
  std::filesystem::path run_dir() const;
  bool stage_enabled(const std::string& stage) const;
  /// Config keys a stage depends on (its own sections).
  Config stage_config(const std::string& stage) const;
};

struct StageRecord {
  std::string name;
  std::string hash;      // over the stage's config and its upstream hashes
  std::string upstream;  // upstream hashes joined by ','
  std::filesystem::path dir;
  bool reused = false;   // already complete, left untouched
};

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<StageRecord> stages;
};

/// Runs every enabled stage up to and including `until` (all when empty).
/// Completed stages with an unchanged hash are skipped; each stage writes
/// into a partial directory renamed into place on success.
RunResult run_pipeline(const RunConfig& config, const std::string& until = "");

/// Planned stage records (hash and directory) without running anything.
std::vector<StageRecord> plan(const RunConfig& config);

/// Encoder described by a stage's encoder.json.
std::unique_ptr<Encoder> load_stage_encoder(const std::filesystem::path& stage_dir);

struct Report {
  std::string markdown;
  std::vector<std::string> missing;  // stages without artifacts
  std::vector<std::filesystem::path> plots;
};

/// Reads run.json, checks every stage's hash chain and writes report.md plus
/// PNG plots. Throws ConfigError when no stage has completed or when
/// artifacts of different provenance are mixed.
Report report(const std::filesystem::path& run_dir);

}  // namespace patchsearch::pipeline
