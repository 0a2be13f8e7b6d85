#pragma once

// Counterfactual sweeps along ranked directions, grid rendering and the
// pixel-witness check used to tie directions back to known factors.

#include <filesystem>
#include <string>
#include <vector>

#include "diffex/classifier.hpp"
#include "diffex/directions.hpp"
#include "diffex/ranking.hpp"
#include "diffex/semantic_ae.hpp"

namespace diffex::explain {

struct CounterfactualResult {
  std::string source_id;
  int k = 0;
  int sign = 1;
  std::vector<double> alphas;   // unsigned magnitudes; applied as sign * alpha
  std::vector<Image> images;    // one per alpha
  Mat<double> probs;            // (n_classes x n_alphas)
};

/// One inversion of x, reused for every alpha.  alphas must contain 0; that
/// entry is exactly reconstruct(x).
CounterfactualResult generate_counterfactual(const Image& x, const std::string& id,
                                             const semantic::SemanticAE& ae,
                                             const classifier::ClassifierModel& cls,
                                             const directions::DirectionBank<float>& bank, int k,
                                             int sign, const std::vector<double>& alphas, int n_steps);

/// Tile layout: rows are results, columns alphas, with a label band under
/// each tile showing the target-class probability to 2 decimals.  A sidecar
/// text file (<out>.txt) repeats the printed values.
void emit_grid(const std::vector<CounterfactualResult>& results, int target_class,
               const std::filesystem::path& out_path);

/// The sidecar written next to a grid.
std::filesystem::path sidecar_path(const std::filesystem::path& grid_path);

/// Label text as printed on a tile.
std::string format_prob(double p);

/// 3x5 bitmap glyph for '0'-'9', '.', '-', '+'; bit 14 is the top-left.
std::uint16_t glyph(char c);

struct WitnessResult {
  double cytoplasm_fraction = 0.0;  // share of pool where the witness moved the class-consistent way
  double blob_fraction = 0.0;
  double mean_delta = 0.0;          // mean target-class probability shift
  double best_fraction() const { return std::max(cytoplasm_fraction, blob_fraction); }
};

/// Applies (k, sign, alpha) to every pool image and compares pixel
/// witnesses against the alpha = 0 reconstruction.  Moving toward class 1
/// the cytoplasm mean and nucleus count should fall; toward class 0 rise.
WitnessResult evaluate_witness(ranking::ModelEngine& engine, std::size_t pool_size, int k, int sign,
                               double alpha, int target_class);

}  // namespace diffex::explain
