#pragma once

// Experiment configuration: one JSON document with a closed, versioned
// schema.  Every field has a declared range; parsing reports all
// violations at once, keyed by dotted path ("directions.tau").

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffex/classifier.hpp"
#include "diffex/datagen.hpp"
#include "diffex/directions.hpp"
#include "diffex/ranking.hpp"
#include "diffex/semantic_ae.hpp"

namespace diffex::config {

inline constexpr int kSchemaVersion = 1;

struct ExplainConfig {
  std::vector<double> alphas{0.0, 0.5, 1.0, 1.5};
  int n_examples = 4;        // source images per grid
  int metric_samples = 200;  // test images used for reconstruction metrics
  int n_steps = 20;
  bool operator==(const ExplainConfig&) const = default;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  datagen::DatagenConfig datagen;
  classifier::ClassifierConfig classifier;
  semantic::SdaeConfig sdae;
  directions::DirectionsConfig directions;
  ranking::RankingConfig ranking;
  ExplainConfig explain;
};

/// Thrown with every violation found, one per line.
class ConfigError : public InputError {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig parse_config(const std::filesystem::path& path);
std::string to_json(const ExperimentConfig& cfg);
void write_config(const std::filesystem::path& path, const ExperimentConfig& cfg);

/// Range and cross-field checks on an in-memory config.
std::vector<std::string> validate(const ExperimentConfig& cfg);

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

/// Every dotted key the schema accepts.
std::vector<std::string> schema_keys();

/// Nearest schema key by edit distance, or "" when nothing is close.
std::string suggest_key(const std::string& key);
std::size_t edit_distance(const std::string& a, const std::string& b);

/// Stages in pipeline order.
inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"datagen", "train-classifier", "train-sdae",
                                              "discover", "rank", "explain", "metrics"};
  return names;
}

/// Hash over the seed and the config sections a stage depends on.
std::uint64_t stage_hash(const ExperimentConfig& cfg, const std::string& stage);

}  // namespace diffex::config
