#pragma once

// Classifier-aware diffusion autoencoder.  The encoder maps an image to z;
// the conditioning code is z_sem = [z || C(x)] with C the frozen
// classifier's probability vector.  Training minimizes
//   L_sem = L_diffusion + lambda1 * KL(C(x') || C(x)).
//
// Diffusion runs on images rescaled to [-1, 1]; the public API takes and
// returns [0,1] images.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffex/classifier.hpp"
#include "diffex/denoiser.hpp"
#include "diffex/diffusion.hpp"

namespace diffex::semantic {

enum class XPrimeMode { kOneStep, kFullSampling };

struct SdaeConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int d_z = 64;
  double lambda1 = 0.1;
  int ddim_steps = 20;
  int epochs = 12;
  int batch_size = 16;
  double lr = 1e-3;
  int base_channels = 16;
  int emb_dim = 64;
  double ema_decay = 0.995;
  XPrimeMode x_prime = XPrimeMode::kOneStep;
  int x_prime_steps = 4;  // DDIM steps for x' when x_prime = full sampling
  int invert_refine = 2;  // fixed-point iterations per inversion step (0 = plain DDIM inversion)
  double code_noise = 0.25;  // training-time N(0, sd^2) jitter on the encoder part of z_sem
};

template <typename S>
class EncoderNet {
 public:
  EncoderNet(int d_z, std::uint64_t seed) : d_z_(d_z) {
    Rng rng(seed);
    c1_ = nn::Conv2d<S>(params_, "conv1", 3, 16, rng, 3, 1);
    c2_ = nn::Conv2d<S>(params_, "conv2", 16, 32, rng, 3, 2);
    c3_ = nn::Conv2d<S>(params_, "conv3", 32, 64, rng, 3, 2);
    c4_ = nn::Conv2d<S>(params_, "conv4", 64, 64, rng, 3, 2);
    fc_ = nn::Linear<S>(params_, "fc", 64, d_z, rng);
  }

  /// images in [0,1] -> z on the sphere of radius sqrt(d_z), one column per
  /// image.  (A tanh bound saturated during training: codes collapsed to
  /// the corners and the encoder stopped receiving gradient.)
  ad::Var<S> forward(ad::Tape<S>& t, const ad::Var<S>& images) const {
    if (images->value.rows() != 3) throw InputError("encoder: expected 3-channel images");
    auto x = ad::add_scalar(t, ad::scale(t, images, S(2)), S(-1));
    x = ad::silu(t, c1_(t, x));
    x = ad::silu(t, c2_(t, x));
    x = ad::silu(t, c3_(t, x));
    x = ad::silu(t, c4_(t, x));
    auto z = ad::normalize_cols(t, fc_(t, ad::global_avg_pool(t, x)), S(1e-6));
    return ad::scale(t, z, static_cast<S>(std::sqrt(static_cast<double>(d_z_))));
  }

  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }
  int d_z() const { return d_z_; }

 private:
  int d_z_;
  nn::ParamSet<S> params_;
  nn::Conv2d<S> c1_, c2_, c3_, c4_;
  nn::Linear<S> fc_;
};

/// [z || probs].  probs must lie on the simplex within 1e-4.
template <typename S>
Vec<S> make_semantic_code(const Vec<S>& z, const Vec<S>& probs) {
  if (probs.size() < 1 || (probs.array() < S(-1e-4)).any() ||
      std::abs(static_cast<double>(probs.sum()) - 1.0) > 1e-4)
    throw InputError("make_semantic_code: probabilities are not on the simplex");
  Vec<S> code(z.size() + probs.size());
  code << z, probs;
  return code;
}

/// Trailing n_classes entries of a semantic code.
template <typename S>
Vec<S> code_probs(const Vec<S>& code, int n_classes = classifier::kClasses) {
  return code.tail(n_classes);
}

/// Mean over samples of KL(p' || p) = sum_c p'_c (log p'_c - log p_c), with
/// both distributions floored at 1e-8.  Columns are samples.
inline double kl_divergence(const Mat<double>& p_prime, const Mat<double>& p) {
  const Eigen::ArrayXXd a = p_prime.array().max(1e-8), b = p.array().max(1e-8);
  return (a * (a.log() - b.log())).sum() / static_cast<double>(p.cols());
}

/// Caller-controlled noise for one loss evaluation.
template <typename S>
struct NoiseDraw {
  std::vector<int> steps;  // one timestep in [1, T] per sample
  Mat<S> eps;              // same shape as the image batch
  Mat<S> code_eps;         // optional (code_dim x N) jitter added to z_sem; empty = none
};

template <typename S>
NoiseDraw<S> draw_noise(Rng& rng, Eigen::Index samples, Eigen::Index rows, Eigen::Index cols, int T) {
  NoiseDraw<S> d;
  for (Eigen::Index i = 0; i < samples; ++i) d.steps.push_back(static_cast<int>(rng.uniform_int(1, T)));
  d.eps.resize(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) d.eps(i, j) = static_cast<S>(rng.normal());
  return d;
}

template <typename S>
struct LossTerms {
  ad::Var<S> diffusion;
  ad::Var<S> cls;  // null when the classifier term is not built
  ad::Var<S> total;
};

/// Builds the L_sem graph for one batch.
///   images01: (3 x N*side*side) in [0,1]
///   probs:    (n_classes x N) frozen classifier probabilities of images01
template <typename S>
LossTerms<S> semantic_loss(ad::Tape<S>& t, const EncoderNet<S>& encoder,
                           const diffusion::DenoiserNet<S>& denoiser,
                           const classifier::ClassifierNet<S>* cls_net, const Mat<S>& images01,
                           const Mat<S>& probs, const NoiseDraw<S>& draw,
                           const diffusion::NoiseSchedule& schedule, double lambda1,
                           XPrimeMode mode = XPrimeMode::kOneStep, int x_prime_steps = 4) {
  const int side = denoiser.config().side;
  const Eigen::Index n = probs.cols();
  auto x01 = t.constant(images01, side, side);
  auto z = encoder.forward(t, x01);
  auto z_sem = ad::concat_rows(t, z, t.constant(probs));
  if (draw.code_eps.size() != 0) z_sem = ad::add(t, z_sem, t.constant(draw.code_eps));

  const Eigen::Index hw = static_cast<Eigen::Index>(side) * side;
  Mat<S> x_t((images01.array() * S(2) - S(1)).matrix());
  for (Eigen::Index s = 0; s < n; ++s) {
    const double ab = schedule.alpha_bar(draw.steps[static_cast<std::size_t>(s)]);
    x_t.middleCols(s * hw, hw) = static_cast<S>(std::sqrt(ab)) * x_t.middleCols(s * hw, hw) +
                                 static_cast<S>(std::sqrt(1.0 - ab)) * draw.eps.middleCols(s * hw, hw);
  }
  auto xt = t.constant(x_t, side, side);
  auto eps_hat = denoiser.forward(t, xt, draw.steps, z_sem);
  LossTerms<S> out;
  out.diffusion = ad::mean(t, ad::square(t, ad::sub(t, eps_hat, t.constant(draw.eps, side, side))));
  out.total = out.diffusion;
  if (cls_net == nullptr) return out;

  // x' estimate in [-1, 1].
  ad::Var<S> x0_hat;
  if (mode == XPrimeMode::kOneStep) {
    std::vector<S> c_x, c_eps;
    for (int step : draw.steps) {
      const double ab = schedule.alpha_bar(step);
      c_x.push_back(static_cast<S>(1.0 / std::sqrt(ab)));
      c_eps.push_back(static_cast<S>(-std::sqrt(1.0 - ab) / std::sqrt(ab)));
    }
    x0_hat = ad::add(t, ad::scale_samples(t, xt, c_x), ad::scale_samples(t, eps_hat, c_eps));
  } else {
    ad::Var<S> x = xt;
    ad::Var<S> eps = eps_hat;
    for (int j = x_prime_steps; j >= 1; --j) {
      std::vector<int> cur, prev;
      for (int step : draw.steps) {
        cur.push_back(static_cast<int>(std::llround(static_cast<double>(step) * j / x_prime_steps)));
        prev.push_back(static_cast<int>(std::llround(static_cast<double>(step) * (j - 1) / x_prime_steps)));
      }
      if (j != x_prime_steps) eps = denoiser.forward(t, x, cur, z_sem);
      std::vector<S> a_x, a_eps;
      for (std::size_t s = 0; s < cur.size(); ++s) {
        const double ab = schedule.alpha_bar(cur[s]), ab_prev = schedule.alpha_bar(prev[s]);
        const double k = std::sqrt(ab_prev / ab);
        a_x.push_back(static_cast<S>(k));
        a_eps.push_back(static_cast<S>(std::sqrt(1.0 - ab_prev) - k * std::sqrt(1.0 - ab)));
      }
      x = ad::add(t, ad::scale_samples(t, x, a_x), ad::scale_samples(t, eps, a_eps));
    }
    x0_hat = x;
  }
  auto x_prime01 = ad::add_scalar(t, ad::scale(t, x0_hat, S(0.5)), S(0.5));
  auto logits = cls_net->forward(t, x_prime01).logits;
  auto p_prime = ad::clamp_min(t, ad::softmax_cols(t, logits), S(1e-8));
  Mat<S> log_p = probs.array().max(S(1e-8)).log().matrix();
  auto kl_terms = ad::mul(t, p_prime, ad::sub(t, ad::log(t, p_prime), t.constant(log_p)));
  out.cls = ad::scale(t, ad::sum(t, kl_terms), S(1) / static_cast<S>(n));
  out.total = ad::add(t, out.diffusion, ad::scale(t, out.cls, static_cast<S>(lambda1)));
  return out;
}

/// Encoder + denoiser + schedule, frozen after training.
class SemanticAE {
 public:
  SemanticAE(const SdaeConfig& cfg, int side, std::uint64_t seed);

  const SdaeConfig& config() const { return cfg_; }
  const diffusion::NoiseSchedule& schedule() const { return schedule_; }
  int side() const { return side_; }
  int code_dim() const { return cfg_.d_z + classifier::kClasses; }

  EncoderNet<float>& encoder() { return encoder_; }
  const EncoderNet<float>& encoder() const { return encoder_; }
  diffusion::DenoiserNet<float>& denoiser() { return denoiser_; }
  const diffusion::DenoiserNet<float>& denoiser() const { return denoiser_; }

  Vec<float> encode(const Image& x) const;
  Vec<float> semantic_code(const Image& x, const classifier::ClassifierModel& cls) const;

  /// eps(x_t, t, z_sem) on [-1,1]-scaled images.
  Mat<float> predict_eps(const Mat<float>& x_t, int step, const Mat<float>& z_sem) const;

  /// x_T for one image (returned in the [-1,1] diffusion space).
  Mat<float> invert(const Image& x, const Vec<float>& z_sem, int n_steps) const;
  /// Decodes x_T under z_sem; output clamped to [0,1].
  Image generate(const Mat<float>& x_T, const Vec<float>& z_sem, int n_steps) const;
  /// generate(invert(x, z_sem(x)), z_sem(x)).
  Image reconstruct(const Image& x, const classifier::ClassifierModel& cls, int n_steps) const;

  void freeze();
  std::uint64_t checksum() const;

  Checkpoint to_checkpoint(std::uint64_t config_hash) const;
  static SemanticAE from_checkpoint(const Checkpoint& ckpt);

 private:
  SdaeConfig cfg_;
  int side_;
  diffusion::NoiseSchedule schedule_;
  EncoderNet<float> encoder_;
  diffusion::DenoiserNet<float> denoiser_;
};

struct SdaeTrainReport {
  std::vector<double> diffusion_loss;  // per-epoch means
  std::vector<double> cls_loss;
  std::vector<double> total_loss;
  std::uint64_t seed = 0;
};

struct SdaeTrainOptions {
  /// When false the classifier term is never built (the ablation reference).
  bool build_cls_term = true;
  /// On divergence, the last completed epoch's parameters are saved here.
  std::optional<std::filesystem::path> last_good_path;
  std::function<void(int epoch, double total)> on_epoch;
};

std::pair<SemanticAE, SdaeTrainReport> train_semantic_ae(
    const datagen::DatasetSplit& split, const classifier::ClassifierModel& cls,
    const SdaeConfig& cfg, std::uint64_t seed, const SdaeTrainOptions& options = {});

/// Scalar L_diffusion for a batch with injected noise.
double diffusion_loss(const std::vector<const Image*>& batch, const SemanticAE& model,
                      const classifier::ClassifierModel& cls, const NoiseDraw<float>& draw);
/// Same, drawing t and eps from rng.
double diffusion_loss(const std::vector<const Image*>& batch, const SemanticAE& model,
                      const classifier::ClassifierModel& cls, Rng& rng);

/// KL(C(x') || C(x)) averaged over the batch.
double classifier_kl_loss(const std::vector<const Image*>& x_prime,
                          const std::vector<const Image*>& x,
                          const classifier::ClassifierModel& cls);

}  // namespace diffex::semantic
