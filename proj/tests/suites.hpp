#pragma once

// Self-contained check suites shared by the unit tests and the acceptance
// runner.  Each returns pass/fail plus a one-line detail.

#include <functional>
#include <string>
#include <vector>

#include "diffex/autodiff.hpp"
#include "diffex/directions.hpp"
#include "diffex/nn.hpp"

namespace diffex::suites {

struct Check {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

// Naive loop oracles.
double contrastive_oracle(const Mat<double>& F, int N, int K, double tau);
double covariance_oracle(const std::vector<Mat<double>>& units);  // units[k]: (d x N)

/// Central-difference check of every (or a sample of) parameter entries.
struct GradReport {
  double worst_rel = 0.0;
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t nonzero = 0;  // entries with a gradient large enough to compare
};
GradReport grad_check(nn::ParamSet<double>& ps, const std::function<ad::Var<double>(ad::Tape<double>&)>& loss,
                      std::size_t max_entries, std::uint64_t seed, double rel_tol = 1e-3, double h = 1e-6);

/// Adds N(0, sd) noise to every parameter so no gradient is trivially zero.
void jitter(nn::ParamSet<double>& ps, double sd, std::uint64_t seed);

Check analytic_oracles();       // contrastive / covariance / KL / shift norm
Check diffusion_mechanics();    // schedule, q_sample round trip, DDIM determinism, T=2 case
Check gradient_suite();         // L_diffusion, L_cls, L_cont, L_reg
Check ranking_suite();          // scripted-delta greedy ranking
Check kid_suite();              // KID estimator

}  // namespace diffex::suites
