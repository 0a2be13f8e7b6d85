#include <cmath>

#include "doctest.h"
#include "diffex/datagen.hpp"
#include "diffex/metrics.hpp"
#include "diffex/rng.hpp"

using namespace diffex;

namespace {

Image noise_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  Image im{Mat<float>(3, side * side), side};
  for (Eigen::Index i = 0; i < im.pixels.size(); ++i) im.pixels.data()[i] = static_cast<float>(rng.uniform());
  return im;
}

// Direct per-window SSIM over every valid 11x11 position.
double ssim_oracle(const Image& a, const Image& b) {
  const auto w = metrics::gaussian_window(11, 1.5);
  const double C1 = 1e-4, C2 = 9e-4;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    int count = 0;
    for (int y0 = 0; y0 + 11 <= a.side; ++y0)
      for (int x0 = 0; x0 + 11 <= a.side; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < 11; ++dy)
          for (int dx = 0; dx < 11; ++dx) {
            const double wt = w[dy] * w[dx];
            const double va = a.at(c, y0 + dy, x0 + dx), vb = b.at(c, y0 + dy, x0 + dx);
            ma += wt * va, mb += wt * vb;
            saa += wt * va * va, sbb += wt * vb * vb, sab += wt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        sum += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        ++count;
      }
    total += sum / count;
  }
  return total / 3;
}

}  // namespace

TEST_CASE("gaussian window sums to one") {
  const auto w = metrics::gaussian_window();
  double s = 0;
  for (double v : w) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w[5] > w[0]);
}

TEST_CASE("ssim matches the per-window definition") {
  const Image a = noise_image(16, 1), b = noise_image(16, 2);
  CHECK(metrics::ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-5));
  CHECK(metrics::ssim(a, a) == doctest::Approx(1.0).epsilon(1e-6));
  const Image c = datagen::render_image(datagen::sample_factors(0, 3), 24);
  const Image d = datagen::render_image(datagen::sample_factors(1, 3), 24);
  CHECK(metrics::ssim(c, d) == doctest::Approx(ssim_oracle(c, d)).epsilon(1e-5));
  CHECK_THROWS_AS(metrics::ssim(noise_image(8, 1), noise_image(8, 2)), InputError);
  CHECK_THROWS_AS(metrics::ssim(a, noise_image(24, 1)), InputError);
}

TEST_CASE("mse") {
  Image a = noise_image(16, 1), b = a;
  CHECK(metrics::mse(a, b) == 0.0);
  b.pixels.array() += 0.1f;
  CHECK(metrics::mse(a, b) == doctest::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("kid rejects bad shapes") {
  CHECK_THROWS_AS(metrics::kid(Mat<double>::Zero(1, 3), Mat<double>::Zero(4, 3)), InputError);
  CHECK_THROWS_AS(metrics::kid(Mat<double>::Zero(4, 2), Mat<double>::Zero(4, 3)), InputError);
}

TEST_CASE("ssim of constant mid-grey against its inversion") {
  Image a{Mat<float>::Constant(3, 16 * 16, 0.5f), 16};
  Image b = a;
  b.pixels = (1.0f - a.pixels.array()).matrix();
  CHECK(metrics::ssim(a, b) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(metrics::ssim(a, b) == doctest::Approx(metrics::ssim(b, a)));
}

TEST_CASE("standardize_like") {
  Mat<double> ref(4, 2);
  ref << 1, 5, 2, 5, 3, 5, 4, 5;
  const Mat<double> z = metrics::standardize_like(ref, ref);
  CHECK(z.col(0).mean() == doctest::Approx(0.0));
  CHECK(z.col(0).squaredNorm() / 3 == doctest::Approx(1.0));
  CHECK(z.col(1).cwiseAbs().maxCoeff() == 0.0);  // constant column only centred
  CHECK_THROWS_AS(metrics::standardize_like(ref.topRows(1), ref), InputError);
}
