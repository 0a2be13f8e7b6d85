#pragma once

// Stage orchestration over an artifact directory:
//
//   data/             rendered dataset (+ STAGE stamp)
//   classifier.ckpt   classifier.txt
//   sdae.ckpt         sdae.txt
//   directions.ckpt   directions.txt
//   ranking.txt
//   explain/          grids, sidecars, witness.txt
//   metrics.txt
//   summary.txt
//   run_manifest.tsv  one row per executed stage
//
// Every output is written under a temporary name and renamed into place.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffex/config.hpp"

namespace diffex::pipeline {

namespace fs = std::filesystem;

enum class ExitCode : int { kOk = 0, kValidation = 1, kDependency = 2, kDivergence = 3, kIo = 4 };

ExitCode exit_code_for(const std::exception& e);

struct Artifacts {
  fs::path root;
  fs::path data;
  fs::path classifier;
  fs::path sdae;
  fs::path bank;
  fs::path ranking;
  fs::path explain;
  fs::path metrics;
  fs::path summary;
  fs::path manifest;

  static Artifacts under(const fs::path& root);
};

/// flag, else $DIFFEX_ARTIFACT_ROOT, else ./artifacts.
fs::path artifact_root(const std::optional<fs::path>& flag);

/// Sidecar report of a checkpoint: classifier.ckpt -> classifier.txt.
fs::path report_of(const fs::path& ckpt);

/// Exclusive ownership of an artifact directory via <dir>/.lock.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

using Log = std::function<void(const std::string&)>;

struct StageRecord {
  std::string stage;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<std::pair<std::string, std::uint64_t>> inputs;
  std::vector<std::pair<std::string, std::uint64_t>> outputs;
};

/// Runs one stage.  Throws DependencyError naming the upstream stage when
/// an input is missing or was produced under a different config.
StageRecord run_stage(const std::string& stage, const config::ExperimentConfig& cfg,
                      const Artifacts& artifacts, const Log& log = {});

/// Appends a row to artifacts.manifest.
void record_stage(const Artifacts& artifacts, const StageRecord& rec);

/// Every stage in order, then the summary.
void run_all(const config::ExperimentConfig& cfg, const Artifacts& artifacts, const Log& log = {});

struct Summary {
  std::string text;
  std::vector<std::string> missing;  // stages whose outputs are absent
};

Summary build_summary(const Artifacts& artifacts);

/// Writes summary.txt; throws DependencyError listing missing stages
/// (after writing, so the flagged summary is still on disk).
void write_summary(const Artifacts& artifacts);

/// Reads "key = value" lines of a report file.
std::vector<std::pair<std::string, std::string>> read_key_values(const fs::path& path);

}  // namespace diffex::pipeline
