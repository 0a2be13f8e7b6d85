#pragma once

// Noise schedule, forward noising, and deterministic (eta = 0) DDIM
// sampling / inversion.  Step indices run over [0, T]; t = 0 is the clean
// image with alpha_bar(0) = 1, and alpha_bar(t) for t >= 1 is the
// cumulative product of (1 - beta_s) for s = 1..t.

#include <cmath>
#include <concepts>
#include <string>
#include <vector>

#include "diffex/autodiff.hpp"
#include "diffex/errors.hpp"

namespace diffex::diffusion {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // betas[t-1] for t = 1..T
  std::vector<double> alphas;      // 1 - betas
  std::vector<double> alpha_bars;  // alpha_bars[t-1] = prod_{s<=t} alphas[s-1]

  /// alpha_bar(t) for t in [0, T]; alpha_bar(0) = 1.
  double alpha_bar(int t) const {
    if (t < 0 || t > T)
      throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t) - 1];
  }
};

/// Linear beta schedule from beta_start to beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw InputError("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InputError("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double beta =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    const double next = prod * (1.0 - beta);
    // betas so small or products so deep that doubles stop resolving the
    // decay are rejected rather than silently producing flat/zero steps
    if (!(next < prod && next > 0.0))
      throw InputError("make_schedule: alpha_bar not representable at t=" + std::to_string(i + 1));
    prod = next;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
template <typename Derived, typename DerivedEps>
Mat<typename Derived::Scalar> q_sample(const Eigen::MatrixBase<Derived>& x0, int t,
                                       const Eigen::MatrixBase<DerivedEps>& eps,
                                       const NoiseSchedule& schedule) {
  using S = typename Derived::Scalar;
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols())
    throw InputError("q_sample: x0/eps shape mismatch");
  const double ab = schedule.alpha_bar(t);
  return static_cast<S>(std::sqrt(ab)) * x0 + static_cast<S>(std::sqrt(1.0 - ab)) * eps;
}

/// One-step clean-image estimate; exact left inverse of q_sample when
/// eps_hat equals the injected noise.
template <typename Derived, typename DerivedEps>
Mat<typename Derived::Scalar> predict_x0(const Eigen::MatrixBase<Derived>& x_t, int t,
                                         const Eigen::MatrixBase<DerivedEps>& eps_hat,
                                         const NoiseSchedule& schedule) {
  using S = typename Derived::Scalar;
  const double ab = schedule.alpha_bar(t);
  if (!(ab > 0.0)) throw NumericError("predict_x0: alpha_bar is zero at t=" + std::to_string(t));
  return (x_t - static_cast<S>(std::sqrt(1.0 - ab)) * eps_hat) / static_cast<S>(std::sqrt(ab));
}

/// Strided timesteps tau_1 < ... < tau_n = T used by both sampler and
/// inverter: tau_i = round(i * T / n).
inline std::vector<int> ddim_timesteps(int T, int n_steps) {
  if (n_steps < 1) throw InputError("ddim: n_steps must be >= 1");
  if (n_steps > T) throw InputError("ddim: n_steps must be <= T");
  std::vector<int> taus;
  for (int i = 1; i <= n_steps; ++i)
    taus.push_back(static_cast<int>(std::llround(static_cast<double>(i) * T / n_steps)));
  return taus;
}

/// A noise predictor: eps(x_t, t, z_sem) with x_t an image batch matrix and
/// z_sem a (code_dim x batch) matrix.
template <typename F, typename S>
concept EpsPredictor = requires(const F& f, const Mat<S>& x, int t, const Mat<S>& z) {
  { f(x, t, z) } -> std::convertible_to<Mat<S>>;
};

/// One deterministic DDIM move from t_from to t_to given eps at t_from.
template <typename S>
Mat<S> ddim_step(const Mat<S>& x, int t_from, int t_to, const Mat<S>& eps,
                 const NoiseSchedule& schedule) {
  const double ab_to = schedule.alpha_bar(t_to);
  const Mat<S> x0 = predict_x0(x, t_from, eps, schedule);
  return static_cast<S>(std::sqrt(ab_to)) * x0 + static_cast<S>(std::sqrt(1.0 - ab_to)) * eps;
}

/// Deterministic reverse process from x_T down to t = 0.
template <typename S, EpsPredictor<S> Eps>
Mat<S> ddim_sample(const Mat<S>& x_T, const Mat<S>& z_sem, const Eps& eps_fn,
                   const NoiseSchedule& schedule, int n_steps) {
  const auto taus = ddim_timesteps(schedule.T, n_steps);
  Mat<S> x = x_T;
  for (int i = static_cast<int>(taus.size()) - 1; i >= 0; --i) {
    const int t = taus[static_cast<std::size_t>(i)];
    const int t_prev = i == 0 ? 0 : taus[static_cast<std::size_t>(i) - 1];
    const Mat<S> eps = eps_fn(x, t, z_sem);
    x = ddim_step<S>(x, t, t_prev, eps, schedule);
  }
  return x;
}

/// Deterministic inversion from x_0 up to t = T over the same stride.
///
/// The plain update predicts eps at the current step, while the sampler
/// later evaluates it at the next one; the mismatch is what makes
/// invert-then-sample lossy.  With refine > 0 each step is solved as a
/// fixed point x' = step(x, eps(x', t_next)), `refine` iterations deep,
/// which the sampler's step undoes exactly once converged.
template <typename S, EpsPredictor<S> Eps>
Mat<S> ddim_invert(const Mat<S>& x0, const Mat<S>& z_sem, const Eps& eps_fn,
                   const NoiseSchedule& schedule, int n_steps, int refine = 0) {
  if (refine < 0) throw InputError("ddim: refine must be >= 0");
  const auto taus = ddim_timesteps(schedule.T, n_steps);
  Mat<S> x = x0;
  int t = 0;
  for (int t_next : taus) {
    Mat<S> eps = eps_fn(x, t, z_sem);
    Mat<S> next = ddim_step<S>(x, t, t_next, eps, schedule);
    for (int r = 0; r < refine; ++r) {
      eps = eps_fn(next, t_next, z_sem);
      next = ddim_step<S>(x, t, t_next, eps, schedule);
    }
    x = std::move(next);
    t = t_next;
  }
  return x;
}

}  // namespace diffex::diffusion
