#include "diffex/metrics.hpp"

#include <cmath>
#include <string>

namespace diffex::metrics {

namespace {

constexpr int kWindow = 11;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void check_pair(const Image& a, const Image& b, const char* what) {
  if (a.side != b.side || a.pixels.rows() != b.pixels.rows() || a.pixels.cols() != b.pixels.cols())
    throw InputError(std::string(what) + ": image shape mismatch");
}

// Valid-mode separable filter of a side x side plane stored row-major.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const std::vector<double>& w) {
  const auto n = plane.rows(), out = n - kWindow + 1;
  Eigen::MatrixXd tmp = Eigen::MatrixXd::Zero(out, n);
  for (Eigen::Index i = 0; i < kWindow; ++i) tmp += w[static_cast<std::size_t>(i)] * plane.middleRows(i, out);
  Eigen::MatrixXd res = Eigen::MatrixXd::Zero(out, out);
  for (Eigen::Index j = 0; j < kWindow; ++j) res += w[static_cast<std::size_t>(j)] * tmp.middleCols(j, out);
  return res;
}

}  // namespace

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

double ssim(const Image& a, const Image& b) {
  check_pair(a, b, "ssim");
  if (a.side < kWindow) throw InputError("ssim: images smaller than the 11x11 window");
  const auto w = gaussian_window();
  const int side = a.side;
  double acc = 0.0;
  for (Eigen::Index c = 0; c < a.pixels.rows(); ++c) {
    // pixel p = y*side + x, so a row-major map gives plane(y, x)
    Eigen::MatrixXd x = Eigen::Map<const Eigen::Matrix<float, -1, -1, Eigen::RowMajor>, 0, Eigen::InnerStride<>>(
                            a.pixels.data() + c, side, side, Eigen::InnerStride<>(a.pixels.rows()))
                            .cast<double>();
    Eigen::MatrixXd y = Eigen::Map<const Eigen::Matrix<float, -1, -1, Eigen::RowMajor>, 0, Eigen::InnerStride<>>(
                            b.pixels.data() + c, side, side, Eigen::InnerStride<>(b.pixels.rows()))
                            .cast<double>();
    const Eigen::ArrayXXd mx = filter_valid(x, w).array(), my = filter_valid(y, w).array();
    const Eigen::ArrayXXd sxx = filter_valid(x.cwiseProduct(x), w).array() - mx * mx;
    const Eigen::ArrayXXd syy = filter_valid(y.cwiseProduct(y), w).array() - my * my;
    const Eigen::ArrayXXd sxy = filter_valid(x.cwiseProduct(y), w).array() - mx * my;
    const Eigen::ArrayXXd map = ((2 * mx * my + kC1) * (2 * sxy + kC2)) /
                                ((mx * mx + my * my + kC1) * (sxx + syy + kC2));
    acc += map.mean();
  }
  return acc / static_cast<double>(a.pixels.rows());
}

double mse(const Image& a, const Image& b) {
  check_pair(a, b, "mse");
  return (a.pixels.cast<double>() - b.pixels.cast<double>()).squaredNorm() /
         static_cast<double>(a.pixels.size());
}

double perceptual_distance(const Image& a, const Image& b, const classifier::ClassifierModel& cls) {
  check_pair(a, b, "perceptual_distance");
  const Mat<double> f = cls.penult_features({&a, &b});
  return (f.col(0) - f.col(1)).norm() / static_cast<double>(f.rows());
}

Mat<double> standardize_like(const Mat<double>& reference, const Mat<double>& x) {
  if (reference.rows() < 2) throw InputError("standardize_like: need at least 2 reference rows");
  if (reference.cols() != x.cols()) throw InputError("standardize_like: dimension mismatch");
  const Eigen::RowVectorXd mean = reference.colwise().mean();
  Eigen::RowVectorXd sd =
      ((reference.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(reference.rows() - 1))
          .sqrt()
          .matrix();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  return ((x.rowwise() - mean).array().rowwise() / sd.array()).matrix();
}

double kid(const Mat<double>& fa, const Mat<double>& fb) {
  if (fa.rows() < 2 || fb.rows() < 2) throw InputError("kid: each feature set needs at least 2 rows");
  if (fa.cols() != fb.cols()) throw InputError("kid: feature dimension mismatch");
  const double d = static_cast<double>(fa.cols());
  const auto m = static_cast<double>(fa.rows()), n = static_cast<double>(fb.rows());
  auto kernel = [d](const Mat<double>& x, const Mat<double>& y) {
    return ((x * y.transpose()).array() / d + 1.0).cube().matrix().eval();
  };
  const Mat<double> kxx = kernel(fa, fa), kyy = kernel(fb, fb), kxy = kernel(fa, fb);
  const double sxx = (kxx.sum() - kxx.trace()) / (m * (m - 1));
  const double syy = (kyy.sum() - kyy.trace()) / (n * (n - 1));
  return sxx + syy - 2.0 * kxy.sum() / (m * n);
}

double agreement(const std::vector<const Image*>& originals,
                 const std::vector<const Image*>& reconstructions,
                 const classifier::ClassifierModel& cls) {
  if (originals.size() != reconstructions.size())
    throw InputError("agreement: batches differ in length");
  if (originals.empty()) throw InputError("agreement: empty batch");
  const Mat<double> p = cls.predict_probs(originals), q = cls.predict_probs(reconstructions);
  std::size_t same = 0;
  for (Eigen::Index i = 0; i < p.cols(); ++i) {
    Eigen::Index ap, aq;
    p.col(i).maxCoeff(&ap);
    q.col(i).maxCoeff(&aq);
    same += ap == aq;
  }
  return static_cast<double>(same) / static_cast<double>(originals.size());
}

}  // namespace diffex::metrics
