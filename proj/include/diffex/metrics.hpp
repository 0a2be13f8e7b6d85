#pragma once

// Image-quality and distribution metrics used to evaluate reconstructions
// and counterfactuals.  All are pure functions.

#include <vector>

#include "diffex/classifier.hpp"
#include "diffex/image.hpp"

namespace diffex::metrics {

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), data
/// range 1, computed over valid window positions and averaged over channels.
double ssim(const Image& a, const Image& b);

double mse(const Image& a, const Image& b);

/// ||phi(a) - phi(b)|| / feature_dim, phi = classifier penultimate features.
double perceptual_distance(const Image& a, const Image& b, const classifier::ClassifierModel& cls);

/// Unbiased MMD^2 with kernel (x.y/d + 1)^3.  Rows are samples.
double kid(const Mat<double>& features_a, const Mat<double>& features_b);

/// Per-column z-scores of `x` using the mean/std of `reference` (rows =
/// samples).  Constant reference columns are only centred.
Mat<double> standardize_like(const Mat<double>& reference, const Mat<double>& x);

/// Fraction of pairs whose classifier argmax agrees.
double agreement(const std::vector<const Image*>& originals,
                 const std::vector<const Image*>& reconstructions,
                 const classifier::ClassifierModel& cls);

/// Normalized 1-D Gaussian taps used by ssim().
std::vector<double> gaussian_window(int size = 11, double sigma = 1.5);

}  // namespace diffex::metrics
