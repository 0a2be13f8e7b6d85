#pragma once

// Greedy ranking of signed latent directions by how far they push the
// frozen classifier toward a target class.
//
// Every (direction k, sign) pair is a candidate.  Each round scores all
// remaining candidates on the current pool, keeps the best one if its mean
// delta exceeds tau_rank, and drops the images it moved by more than
// per_image_delta.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffex/classifier.hpp"
#include "diffex/directions.hpp"
#include "diffex/semantic_ae.hpp"

namespace diffex::ranking {

struct RankingConfig {
  double alpha_rank = 1.5;
  double tau_rank = 0.2;
  double per_image_delta = 0.3;
  int n_max = 3;
  int target_class = 1;
  int pool_size = 64;
  int n_steps = 20;  // DDIM steps for inversion and regeneration

  std::vector<std::string> validate(int K = -1) const;
};

struct Candidate {
  int k = 0;
  int sign = 1;
  bool operator==(const Candidate&) const = default;
};

/// Candidate c <-> (k = c / 2, sign = c % 2 ? -1 : +1), so the natural
/// order already encodes the tie-break (lower k first, then +).
inline Candidate candidate_at(int c) { return {c / 2, c % 2 ? -1 : 1}; }
inline int candidate_index(Candidate c) { return 2 * c.k + (c.sign < 0 ? 1 : 0); }

struct RankedDirection {
  int k = 0;
  int sign = 1;
  double alpha = 0.0;
  double mean_delta = 0.0;
  std::size_t pool_before = 0;
  std::vector<std::string> explained_ids;
};

/// delta(c, i): change in target-class probability for pool image i under
/// candidate c.  Called at most once per (c, i).
using DeltaOracle = std::function<double(int candidate, std::size_t image)>;

/// Greedy selection over n_candidates candidates and the given pool ids.
std::vector<RankedDirection> rank_directions(int n_candidates, const std::vector<std::string>& pool_ids,
                                             const DeltaOracle& delta, const RankingConfig& cfg);

/// Abstract model stack so the ranking can run on scripted stand-ins.
class CounterfactualEngine {
 public:
  virtual ~CounterfactualEngine() = default;
  virtual int num_directions() const = 0;
  /// Target-class probability of the image itself.
  virtual double base_prob(std::size_t image, int target_class) = 0;
  /// Target-class probability after shifting image's code by signed_alpha
  /// along direction k and regenerating.
  virtual double shifted_prob(std::size_t image, int k, double signed_alpha, int target_class) = 0;
};

/// Per-image deltas for one candidate.  Throws InputError on an empty pool.
std::vector<double> score_shift(CounterfactualEngine& engine, std::size_t pool_size, int k, int sign,
                                double alpha, int target_class);

std::vector<RankedDirection> rank_directions(CounterfactualEngine& engine,
                                             const std::vector<std::string>& pool_ids,
                                             const RankingConfig& cfg);

/// Real engine over the trained models.  Each pool image is inverted once
/// and the noise reused for every candidate.
class ModelEngine : public CounterfactualEngine {
 public:
  ModelEngine(const semantic::SemanticAE& ae, const classifier::ClassifierModel& cls,
              const directions::DirectionBank<float>& bank, std::vector<const Image*> pool, int n_steps);

  int num_directions() const override { return bank_.K(); }
  double base_prob(std::size_t image, int target_class) override;
  double shifted_prob(std::size_t image, int k, double signed_alpha, int target_class) override;

  /// The regenerated image itself (alpha = 0 gives the reconstruction).
  Image shifted_image(std::size_t image, int k, double signed_alpha);
  const classifier::ClassifierModel& classifier() const { return cls_; }

 private:
  struct Inverted {
    Vec<float> z_sem;
    Mat<float> x_T;
    Mat<double> probs;
  };
  const Inverted& prepared(std::size_t image);

  const semantic::SemanticAE& ae_;
  const classifier::ClassifierModel& cls_;
  const directions::DirectionBank<float>& bank_;
  std::vector<const Image*> pool_;
  int n_steps_;
  std::vector<std::optional<Inverted>> cache_;
};

struct Transition {
  int source_class = 0;
  int target_class = 1;
  std::vector<std::string> pool_ids;
  std::vector<RankedDirection> selected;
};

struct RankingReport {
  RankingConfig config;
  std::uint64_t config_hash = 0;
  std::vector<Transition> transitions;  // configured target first
};

/// Pool for a transition: the first pool_size test images of source_class.
std::vector<const datagen::LabeledImage*> transition_pool(const datagen::DatasetSplit& split,
                                                          int source_class, int pool_size);

/// Ranks both transitions (toward target_class, then back).
RankingReport rank_all(const semantic::SemanticAE& ae, const classifier::ClassifierModel& cls,
                       const directions::DirectionBank<float>& bank, const datagen::DatasetSplit& split,
                       const RankingConfig& cfg);

std::string format_report(const RankingReport& report);
RankingReport parse_report(const std::string& text);

}  // namespace diffex::ranking
