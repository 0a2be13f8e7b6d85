#pragma once

// Procedural two-class "microscopy" images with known generative factors.
//
// Channel roles (fixed convention):
//   0 (red)   cytoplasm: soft textured field around cells, scaled by
//             cytoplasm_intensity
//   1 (green) organelle puncta scattered around each nucleus; their spatial
//             spread grows with organelle_scatter
//   2 (blue)  nuclei: isotropic Gaussian blobs
//
// Class 0 ("untreated"): many spread nuclei, bright cytoplasm, compact
// organelles.  Class 1 ("treated"): the converse.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffex/image.hpp"

namespace diffex::datagen {

struct SyntheticFactors {
  int nucleus_count = 0;
  double nucleus_spacing = 0.0;
  double cytoplasm_intensity = 0.0;
  double organelle_scatter = 0.0;
  std::uint64_t jitter_seed = 0;

  bool operator==(const SyntheticFactors&) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool overlaps(const Range& o) const { return lo <= o.hi && o.lo <= hi; }
};

struct ClassProfile {
  int count_lo = 0;
  int count_hi = 0;
  Range spacing;
  Range cytoplasm;
  Range scatter;
};

struct DatagenConfig {
  int n = 2000;
  int side = 64;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  int max_nuclei = 12;
  double noise_amplitude = 0.02;
  ClassProfile class0{6, 10, {0.55, 1.0}, {0.6, 0.95}, {0.05, 0.3}};
  ClassProfile class1{1, 4, {0.0, 0.45}, {0.05, 0.3}, {0.6, 0.95}};

  /// Returns human-readable violations (empty when valid).
  std::vector<std::string> validate() const;
};

struct LabeledImage {
  std::string id;
  Image image;
  int label = 0;
  SyntheticFactors factors;  // ground truth; never fed to training
};

struct DatasetSplit {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
  std::vector<LabeledImage> test;
  std::uint64_t split_seed = 0;
};

SyntheticFactors sample_factors(int class_label, std::uint64_t rng_seed,
                                const DatagenConfig& config = {});

/// Renders one image; deterministic in (factors, side, noise amplitude).
Image render_image(const SyntheticFactors& factors, int side, double noise_amplitude = 0.02);

/// Builds the balanced, stratified split in memory.
DatasetSplit generate_dataset(const DatagenConfig& config, std::uint64_t master_seed);

/// Writes images as PNG plus manifest.tsv under `dir`.
void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir);

/// Reads a dataset written by write_dataset (pixels are the 8-bit
/// quantized values).
DatasetSplit load_dataset(const std::filesystem::path& dir);

inline constexpr const char* kManifestName = "manifest.tsv";
inline constexpr const char* kManifestHeader = "# diffex-manifest v1";

// Pixel witnesses of the generative factors.

/// Mean of the cytoplasm channel.
double cytoplasm_mean(const Image& image);

/// Connected components (4-neighbour) of the nucleus channel above
/// `threshold`.
int nucleus_blob_count(const Image& image, double threshold = 0.3);

/// Intensity-weighted spatial standard deviation of the organelle channel
/// around its centroid, background-subtracted.
double puncta_spread(const Image& image, double background = 0.02);

}  // namespace diffex::datagen
