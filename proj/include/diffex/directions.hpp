#pragma once

// Contrastive discovery of K latent directions in semantic-code space.
//
//   D_k(z, a)  = z + a * u_k(z),  u_k(z) = MLP1_k(z) / ||MLP1_k(z)||
//   f_i^k      = MLP2(D_k(z_i, a_ik)) - MLP2(z_i)
//   L_cont     = mean over anchors (i,k) of
//                -log( sum_{j != i} e^{sim(f_i^k, f_j^k)/tau}
//                      / sum_j sum_{l != k} e^{sim(f_i^k, f_j^l)/tau} )
//   L_reg      = sum_{k != l} || CrossCov(u_k, u_l) ||_F^2   over the batch
//   L_dir      = L_cont + lambda2 * L_reg
//
// sim is cosine similarity.  FeatureDivergence columns are ordered
// direction-major: column k * N + i holds f_i^k.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "diffex/checkpoint.hpp"
#include "diffex/nn.hpp"

namespace diffex::directions {

inline constexpr double kNormEpsilon = 1e-8;

struct DirectionsConfig {
  int K = 10;
  double tau = 0.5;
  double lambda2 = 1.0;
  double alpha_min = 0.25;
  double alpha_max = 1.5;
  int d_f = 128;
  int hidden = 64;
  int epochs = 30;
  int batch_size = 64;
  double lr = 1e-3;
  /// Restrict shifts to the encoder part of the code (probability slots
  /// left untouched).
  bool encoder_only = false;
};

template <typename S>
struct Mlp {
  nn::Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(nn::ParamSet<S>& ps, const std::string& name, int in, int hidden, int out, Rng& rng)
      : fc1(ps, name + ".fc1", in, hidden, rng), fc2(ps, name + ".fc2", hidden, out, rng) {}

  ad::Var<S> operator()(ad::Tape<S>& t, const ad::Var<S>& x) const {
    return fc2(t, ad::silu(t, fc1(t, x)));
  }
};

template <typename S>
class DirectionBank {
 public:
  DirectionBank(int code_dim, int n_classes, const DirectionsConfig& cfg, std::uint64_t seed)
      : code_dim_(code_dim), n_classes_(n_classes), cfg_(cfg) {
    if (cfg.K < 2) throw InputError("direction bank: K must be >= 2");
    if (!(cfg.tau > 0.0)) throw InputError("direction bank: tau must be > 0");
    Rng rng(seed);
    for (int k = 0; k < cfg.K; ++k)
      directions_.emplace_back(params_, "dir" + std::to_string(k), code_dim, cfg.hidden, code_dim, rng);
    features_ = Mlp<S>(params_, "feat", code_dim, cfg.d_f, cfg.d_f, rng);
  }

  int K() const { return cfg_.K; }
  int code_dim() const { return code_dim_; }
  const DirectionsConfig& config() const { return cfg_; }
  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }

  /// MLP1_k(z), with the probability slots zeroed when encoder_only.
  ad::Var<S> raw_direction(ad::Tape<S>& t, int k, const ad::Var<S>& z) const {
    check_index(k);
    auto d = directions_[static_cast<std::size_t>(k)](t, z);
    if (cfg_.encoder_only) {
      Mat<S> mask = Mat<S>::Ones(code_dim_, d->value.cols());
      mask.bottomRows(n_classes_).setZero();
      d = ad::mul(t, d, t.constant(std::move(mask)));
    }
    return d;
  }

  /// u_k(z), one unit column per code.
  ad::Var<S> unit_direction(ad::Tape<S>& t, int k, const ad::Var<S>& z) const {
    return ad::normalize_cols(t, raw_direction(t, k, z), static_cast<S>(kNormEpsilon));
  }

  /// D_k(z, alpha) for a batch; alphas has one entry per column of z.
  ad::Var<S> shift(ad::Tape<S>& t, int k, const ad::Var<S>& z, const Vec<S>& alphas) const {
    auto u = unit_direction(t, k, z);
    Mat<S> a = alphas.transpose().replicate(code_dim_, 1);
    return ad::add(t, z, ad::mul(t, u, t.constant(std::move(a))));
  }

  ad::Var<S> features(ad::Tape<S>& t, const ad::Var<S>& z) const { return features_(t, z); }

 private:
  void check_index(int k) const {
    if (k < 0 || k >= cfg_.K)
      throw InputError("direction index " + std::to_string(k) + " outside [0, " +
                       std::to_string(cfg_.K) + ")");
  }

  int code_dim_;
  int n_classes_;
  DirectionsConfig cfg_;
  nn::ParamSet<S> params_;
  std::vector<Mlp<S>> directions_;
  Mlp<S> features_;
};

/// D_k(z_sem, alpha) for a single code.  alpha = 0 returns z_sem unchanged.
/// Throws NumericError if ||MLP1_k(z_sem)|| <= 1e-8.
template <typename S>
Vec<S> apply_direction(const DirectionBank<S>& bank, int k, const Vec<S>& z_sem, double alpha) {
  if (z_sem.size() != bank.code_dim()) throw InputError("apply_direction: code dimension mismatch");
  ad::Tape<S> t(false);
  auto z = t.constant(Mat<S>(z_sem));
  auto raw = bank.raw_direction(t, k, z);
  const double norm = static_cast<double>(raw->value.norm());
  if (!(norm > kNormEpsilon))
    throw NumericError("apply_direction: direction " + std::to_string(k) +
                       " has near-zero norm at this code");
  if (alpha == 0.0) return z_sem;
  const Vec<S> u = raw->value.col(0) / static_cast<S>(norm);
  return z_sem + static_cast<S>(alpha) * u;
}

template <typename S>
struct FeatureDivergence {
  Mat<S> f;  // (d_f x N*K), column k*N + i
  int N = 0;
  int K = 0;

  auto at(int i, int k) const { return f.col(static_cast<Eigen::Index>(k) * N + i); }
};

/// Graph form of the feature divergences; alphas is (N x K).
template <typename S>
ad::Var<S> feature_divergence_graph(ad::Tape<S>& t, const DirectionBank<S>& bank,
                                    const ad::Var<S>& z, const Mat<S>& alphas) {
  const auto n = z->value.cols();
  if (n < 2) throw InputError("feature_divergence: batch size must be >= 2");
  if (alphas.rows() != n || alphas.cols() != bank.K())
    throw InputError("feature_divergence: alphas must be (N x K)");
  auto base = bank.features(t, z);
  std::vector<ad::Var<S>> parts;
  for (int k = 0; k < bank.K(); ++k) {
    auto shifted = bank.shift(t, k, z, alphas.col(k));
    parts.push_back(ad::sub(t, bank.features(t, shifted), base));
  }
  return ad::concat_cols(t, parts);
}

template <typename S>
FeatureDivergence<S> feature_divergence(const DirectionBank<S>& bank, const Mat<S>& z_batch,
                                        const Mat<S>& alphas) {
  ad::Tape<S> t(false);
  auto f = feature_divergence_graph(t, bank, t.constant(z_batch), alphas);
  return {f->value, static_cast<int>(z_batch.cols()), bank.K()};
}

/// Graph form of the contrastive loss over F (d_f x N*K).  Anchors whose
/// feature vector is exactly zero are excluded from every sum; the loss is
/// 0 when no anchor remains.
template <typename S>
ad::Var<S> contrastive_loss_graph(ad::Tape<S>& t, const ad::Var<S>& F, int N, int K, double tau) {
  if (!(tau > 0.0)) throw InputError("contrastive_loss: tau must be > 0");
  const Eigen::Index M = static_cast<Eigen::Index>(N) * K;
  if (F->value.cols() != M) throw InputError("contrastive_loss: expected N*K feature columns");
  std::vector<bool> valid(static_cast<std::size_t>(M));
  for (Eigen::Index a = 0; a < M; ++a) valid[static_cast<std::size_t>(a)] = !F->value.col(a).isZero(0);

  Mat<S> pos = Mat<S>::Zero(M, M), neg = Mat<S>::Zero(M, M), anchor = Mat<S>::Zero(M, 1);
  Eigen::Index n_valid = 0;
  for (Eigen::Index a = 0; a < M; ++a) {
    if (!valid[static_cast<std::size_t>(a)]) continue;
    const Eigen::Index i = a % N, k = a / N;
    bool has_pos = false, has_neg = false;
    for (Eigen::Index b = 0; b < M; ++b) {
      if (!valid[static_cast<std::size_t>(b)]) continue;
      const Eigen::Index j = b % N, l = b / N;
      if (l == k && j != i) pos(a, b) = 1, has_pos = true;
      if (l != k) neg(a, b) = 1, has_neg = true;
    }
    if (has_pos && has_neg) anchor(a, 0) = 1, ++n_valid;
  }
  if (n_valid == 0) return t.constant(Mat<S>::Zero(1, 1));
  for (Eigen::Index a = 0; a < M; ++a)
    if (anchor(a, 0) == 0) {
      pos(a, a) = 1;  // keeps log() finite on masked rows
      neg(a, a) = 1;
    }

  const S inv_tau = static_cast<S>(1.0 / tau);
  auto fn = ad::normalize_cols(t, F, std::numeric_limits<S>::min());
  auto sim = ad::matmul(t, ad::transpose(t, fn), fn);
  // exp((s - 1) / tau): the constant shift cancels in the ratio and keeps
  // the exponent <= 0.
  auto e = ad::exp(t, ad::add_scalar(t, ad::scale(t, sim, inv_tau), -inv_tau));
  auto num = ad::row_sums(t, ad::mul(t, e, t.constant(std::move(pos))));
  auto den = ad::row_sums(t, ad::mul(t, e, t.constant(std::move(neg))));
  auto per_anchor = ad::sub(t, ad::log(t, den), ad::log(t, num));
  return ad::scale(t, ad::sum(t, ad::mul(t, per_anchor, t.constant(std::move(anchor)))),
                   S(1) / static_cast<S>(n_valid));
}

template <typename S>
double contrastive_loss(const FeatureDivergence<S>& div, double tau) {
  ad::Tape<S> t(false);
  return static_cast<double>(
      contrastive_loss_graph(t, t.constant(div.f), div.N, div.K, tau)->value(0, 0));
}

/// Graph form of the covariance regularizer over a batch of codes.
template <typename S>
ad::Var<S> covariance_reg_graph(ad::Tape<S>& t, const DirectionBank<S>& bank, const ad::Var<S>& z) {
  const auto n = z->value.cols();
  if (n < 2) throw InputError("covariance_reg: batch size must be >= 2");
  std::vector<ad::Var<S>> centered;
  for (int k = 0; k < bank.K(); ++k)
    centered.push_back(ad::center_rows(t, bank.unit_direction(t, k, z)));
  const S inv = S(1) / static_cast<S>(n - 1);
  ad::Var<S> total;
  for (int i = 0; i < bank.K(); ++i)
    for (int j = i + 1; j < bank.K(); ++j) {
      auto cov = ad::scale(t, ad::matmul(t, centered[static_cast<std::size_t>(i)],
                                         ad::transpose(t, centered[static_cast<std::size_t>(j)])),
                           inv);
      auto sq = ad::sum(t, ad::square(t, cov));
      total = total ? ad::add(t, total, sq) : sq;
    }
  // Each unordered pair appears twice in the sum over i != j.
  return ad::scale(t, total, S(2));
}

template <typename S>
double covariance_reg(const DirectionBank<S>& bank, const Mat<S>& z_batch) {
  ad::Tape<S> t(false);
  return static_cast<double>(covariance_reg_graph(t, bank, t.constant(z_batch))->value(0, 0));
}

/// Draws alphas (N x K) uniformly from +-[alpha_min, alpha_max].
template <typename S>
Mat<S> sample_alphas(Rng& rng, Eigen::Index n, int k, double alpha_min, double alpha_max) {
  Mat<S> a(n, k);
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mag = rng.uniform(alpha_min, alpha_max);
      a(i, j) = static_cast<S>(rng.uniform() < 0.5 ? -mag : mag);
    }
  return a;
}

template <typename S>
struct DirectionLoss {
  ad::Var<S> contrastive;
  ad::Var<S> reg;
  ad::Var<S> total;
};

template <typename S>
DirectionLoss<S> direction_loss(ad::Tape<S>& t, const DirectionBank<S>& bank, const Mat<S>& z_batch,
                                const Mat<S>& alphas, double lambda2, bool build_reg = true) {
  auto z = t.constant(z_batch);
  auto f = feature_divergence_graph(t, bank, z, alphas);
  DirectionLoss<S> out;
  out.contrastive = contrastive_loss_graph(t, f, static_cast<int>(z_batch.cols()), bank.K(),
                                           bank.config().tau);
  out.total = out.contrastive;
  if (build_reg) {
    out.reg = covariance_reg_graph(t, bank, z);
    out.total = ad::add(t, out.contrastive, ad::scale(t, out.reg, static_cast<S>(lambda2)));
  }
  return out;
}

struct DirectionsTrainReport {
  std::vector<double> contrastive_loss;  // per-epoch means
  std::vector<double> reg_loss;
  std::vector<double> total_loss;
  std::uint64_t seed = 0;
};

struct DirectionsTrainOptions {
  bool build_reg_term = true;
  std::function<void(int epoch, double total)> on_epoch;
};

/// Trains a bank on precomputed semantic codes (code_dim x N_codes).
std::pair<DirectionBank<float>, DirectionsTrainReport> train_directions(
    const Mat<float>& codes, int n_classes, const DirectionsConfig& cfg, std::uint64_t seed,
    const DirectionsTrainOptions& options = {});

/// Mean pairwise |cos| between unit directions of distinct models,
/// averaged over the given codes.
double mean_direction_overlap(const DirectionBank<float>& bank, const Mat<float>& codes);

Checkpoint bank_to_checkpoint(const DirectionBank<float>& bank, int n_classes,
                              std::uint64_t config_hash);
DirectionBank<float> bank_from_checkpoint(const Checkpoint& ckpt);

}  // namespace diffex::directions
