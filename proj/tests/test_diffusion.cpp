#include <cmath>

#include "doctest.h"
#include "diffex/diffusion.hpp"
#include "diffex/rng.hpp"

using namespace diffex;
using namespace diffex::diffusion;

TEST_CASE("q_sample hand value") {
  const auto s = make_schedule(2, 0.1, 0.2);
  const Mat<double> x0 = Mat<double>::Constant(1, 4, 0.5), eps = Mat<double>::Ones(1, 4);
  const Mat<double> xt = q_sample(x0, 2, eps, s);
  CHECK(xt(0, 0) == doctest::Approx(std::sqrt(0.72) * 0.5 + std::sqrt(0.28)).epsilon(1e-12));
  CHECK(xt(0, 0) == doctest::Approx(0.953).epsilon(1e-3));
}

TEST_CASE("invalid schedules are rejected") {
  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), InputError);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), InputError);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), InputError);
  CHECK_THROWS_AS(make_schedule(5000, 0.9, 0.99), InputError);  // alpha_bar underflows
  CHECK_THROWS_AS(make_schedule(10, 0.1, 0.2).alpha_bar(11), InputError);
}

TEST_CASE("timestep stride") {
  CHECK(ddim_timesteps(1000, 4) == std::vector<int>{250, 500, 750, 1000});
  CHECK(ddim_timesteps(10, 3) == std::vector<int>{3, 7, 10});
  CHECK_THROWS_AS(ddim_timesteps(10, 11), InputError);
}

TEST_CASE("zero-noise predictor: inversion scales, sampling undoes it") {
  const auto s = make_schedule(2, 0.1, 0.2);
  const auto zero = [](const Mat<double>& x, int, const Mat<double>&) { return Mat<double>::Zero(x.rows(), x.cols()).eval(); };
  const Mat<double> x0 = Mat<double>::Constant(1, 3, 0.5), z(1, 1);
  const Mat<double> xT = ddim_invert<double>(x0, z, zero, s, 2);
  CHECK(xT(0, 0) == doctest::Approx(0.5 * std::sqrt(0.72)).epsilon(1e-12));
  CHECK(ddim_sample<double>(xT, z, zero, s, 2)(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("sampling with the exact predictor of a Gaussian recovers its mean") {
  // data ~ N(mu, sigma^2): E[eps | x_t] = sqrt(1-ab) (x_t - sqrt(ab) mu) / (ab sigma^2 + 1 - ab)
  const double mu = 0.5, sigma = 0.2;
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const auto opt = [&](const Mat<double>& x, int t, const Mat<double>&) {
    const double ab = s.alpha_bar(t);
    return ((x.array() - std::sqrt(ab) * mu) * std::sqrt(1 - ab) / (ab * sigma * sigma + 1 - ab)).matrix().eval();
  };
  Rng rng(3);
  Mat<double> xT(1, 4000);
  for (Eigen::Index i = 0; i < xT.size(); ++i) xT(0, i) = rng.normal();
  const Mat<double> z(1, 1);
  const Mat<double> x0 = ddim_sample<double>(xT, z, opt, s, 50);
  const double mean = x0.mean();
  const double sd = std::sqrt((x0.array() - mean).square().mean());
  CHECK(std::abs(mean - mu) < 0.05 * mu);
  // 50 coarse steps slightly overshoot the spread
  CHECK(std::abs(sd - sigma) < 0.2 * sigma);
}

TEST_CASE("refined inversion round-trips far better than the plain update") {
  // smooth nonlinear stand-in for a trained predictor
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const auto eps = [](const Mat<double>& x, int t, const Mat<double>&) {
    return (0.8 * (x.array() * (1.0 + t / 1000.0)).sin()).matrix().eval();
  };
  Rng rng(8);
  Mat<double> x0(3, 64);
  for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = rng.uniform(-1.0, 1.0);
  const Mat<double> z(1, 1);
  auto err = [&](int refine) {
    const Mat<double> xT = ddim_invert<double>(x0, z, eps, s, 20, refine);
    return (ddim_sample<double>(xT, z, eps, s, 20) - x0).cwiseAbs().maxCoeff();
  };
  const double plain = err(0), refined = err(2), deep = err(30);
  CHECK(refined < plain / 5);
  CHECK(deep < 1e-8);
  CHECK_THROWS_AS(ddim_invert<double>(x0, z, eps, s, 20, -1), InputError);
}
