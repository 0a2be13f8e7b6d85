#include "diffex/semantic_ae.hpp"

#include <cmath>
#include <numeric>

namespace diffex::semantic {
namespace {

diffusion::DenoiserConfig denoiser_config(const SdaeConfig& cfg, int side) {
  return {cfg.base_channels, cfg.emb_dim, cfg.d_z + classifier::kClasses, side};
}

Mat<float> to_signed(const Mat<float>& x01) { return (x01.array() * 2.0f - 1.0f).matrix(); }

Image to_image01(const Mat<float>& signed_pixels, int side) {
  return Image{((signed_pixels.array() + 1.0f) * 0.5f).cwiseMax(0.0f).cwiseMin(1.0f).matrix(), side};
}

/// Probability columns as float.
Mat<float> classifier_probs(const classifier::ClassifierModel& cls,
                            const std::vector<const Image*>& batch) {
  return cls.predict_probs(batch).cast<float>();
}

struct Ema {
  std::vector<Mat<float>> shadow;
  double decay;

  Ema(const nn::ParamSet<float>& ps, double d) : decay(d) {
    for (const auto& [_, v] : ps.items()) shadow.push_back(v->value);
  }
  void update(const nn::ParamSet<float>& ps) {
    const float a = static_cast<float>(decay);
    std::size_t i = 0;
    for (const auto& [_, v] : ps.items()) {
      shadow[i] = a * shadow[i] + (1.0f - a) * v->value;
      ++i;
    }
  }
  void copy_to(nn::ParamSet<float>& ps) const {
    std::size_t i = 0;
    for (const auto& [_, v] : ps.items()) v->value = shadow[i++];
  }
};

}  // namespace

SemanticAE::SemanticAE(const SdaeConfig& cfg, int side, std::uint64_t seed)
    : cfg_(cfg),
      side_(side),
      schedule_(diffusion::make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)),
      encoder_(cfg.d_z, mix_seed(seed, 11)),
      denoiser_(denoiser_config(cfg, side), mix_seed(seed, 12)) {
  if (side % 8 != 0) throw InputError("semantic AE: image side must be a multiple of 8");
}

Vec<float> SemanticAE::encode(const Image& x) const {
  if (x.channels() != 3 || x.side != side_) throw InputError("encode: image shape mismatch");
  ad::Tape<float> t(false);
  return encoder_.forward(t, t.constant(x.pixels, side_, side_))->value.col(0);
}

Vec<float> SemanticAE::semantic_code(const Image& x, const classifier::ClassifierModel& cls) const {
  const Vec<float> probs = cls.predict_probs(x).col(0).cast<float>();
  return make_semantic_code<float>(encode(x), probs);
}

Mat<float> SemanticAE::predict_eps(const Mat<float>& x_t, int step, const Mat<float>& z_sem) const {
  return denoiser_.predict(x_t, step, z_sem);
}

Mat<float> SemanticAE::invert(const Image& x, const Vec<float>& z_sem, int n_steps) const {
  if (x.channels() != 3 || x.side != side_) throw InputError("invert: image shape mismatch");
  auto eps = [this](const Mat<float>& xt, int step, const Mat<float>& z) {
    return predict_eps(xt, step, z);
  };
  return diffusion::ddim_invert<float>(to_signed(x.pixels), Mat<float>(z_sem), eps, schedule_,
                                       n_steps, cfg_.invert_refine);
}

Image SemanticAE::generate(const Mat<float>& x_T, const Vec<float>& z_sem, int n_steps) const {
  auto eps = [this](const Mat<float>& xt, int step, const Mat<float>& z) {
    return predict_eps(xt, step, z);
  };
  return to_image01(diffusion::ddim_sample<float>(x_T, Mat<float>(z_sem), eps, schedule_, n_steps),
                    side_);
}

Image SemanticAE::reconstruct(const Image& x, const classifier::ClassifierModel& cls,
                              int n_steps) const {
  const Vec<float> z = semantic_code(x, cls);
  return generate(invert(x, z, n_steps), z, n_steps);
}

void SemanticAE::freeze() {
  encoder_.params().freeze();
  denoiser_.params().freeze();
}

std::uint64_t SemanticAE::checksum() const {
  return nn::checksum(encoder_.params()) ^ (nn::checksum(denoiser_.params()) * 31);
}

Checkpoint SemanticAE::to_checkpoint(std::uint64_t config_hash) const {
  Checkpoint c;
  c.stage = "sdae";
  c.config_hash = config_hash;
  c.metadata["side"] = std::to_string(side_);
  c.metadata["T"] = std::to_string(cfg_.T);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", cfg_.beta_start);
  c.metadata["beta_start"] = buf;
  std::snprintf(buf, sizeof buf, "%.17g", cfg_.beta_end);
  c.metadata["beta_end"] = buf;
  c.metadata["d_z"] = std::to_string(cfg_.d_z);
  c.metadata["base_channels"] = std::to_string(cfg_.base_channels);
  c.metadata["emb_dim"] = std::to_string(cfg_.emb_dim);
  c.metadata["ddim_steps"] = std::to_string(cfg_.ddim_steps);
  c.metadata["invert_refine"] = std::to_string(cfg_.invert_refine);
  for (const auto& [name, m] : encoder_.params().snapshot()) c.tensors.emplace_back("encoder." + name, m);
  for (const auto& [name, m] : denoiser_.params().snapshot()) c.tensors.emplace_back("denoiser." + name, m);
  return c;
}

SemanticAE SemanticAE::from_checkpoint(const Checkpoint& ckpt) {
  SdaeConfig cfg;
  cfg.T = std::stoi(ckpt.meta("T"));
  cfg.beta_start = std::stod(ckpt.meta("beta_start"));
  cfg.beta_end = std::stod(ckpt.meta("beta_end"));
  cfg.d_z = std::stoi(ckpt.meta("d_z"));
  cfg.base_channels = std::stoi(ckpt.meta("base_channels"));
  cfg.emb_dim = std::stoi(ckpt.meta("emb_dim"));
  cfg.ddim_steps = std::stoi(ckpt.meta("ddim_steps"));
  cfg.invert_refine = std::stoi(ckpt.meta("invert_refine"));
  SemanticAE m(cfg, std::stoi(ckpt.meta("side")), 0);
  m.encoder_.params().assign_from(ckpt.group("encoder."));
  m.denoiser_.params().assign_from(ckpt.group("denoiser."));
  m.freeze();
  return m;
}

std::pair<SemanticAE, SdaeTrainReport> train_semantic_ae(const datagen::DatasetSplit& split,
                                                         const classifier::ClassifierModel& cls,
                                                         const SdaeConfig& cfg, std::uint64_t seed,
                                                         const SdaeTrainOptions& options) {
  const auto& train = split.train;
  if (train.empty()) throw InputError("train_semantic_ae: empty training split");
  if (!cls.frozen()) throw InputError("train_semantic_ae: classifier must be frozen");
  if (cfg.lambda1 < 0.0) throw InputError("train_semantic_ae: lambda1 must be >= 0");
  const int side = train.front().image.side;
  SemanticAE model(cfg, side, seed);

  // Classifier outputs are fixed, so they are computed once.
  std::vector<Mat<float>> probs(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) probs[i] = classifier_probs(cls, {&train[i].image});

  auto& enc_ps = model.encoder().params();
  auto& den_ps = model.denoiser().params();
  nn::Adam<float> opt_enc(enc_ps, {.lr = cfg.lr, .clip_norm = 1.0});
  nn::Adam<float> opt_den(den_ps, {.lr = cfg.lr, .clip_norm = 1.0});
  std::optional<Ema> ema_enc, ema_den;
  if (cfg.ema_decay > 0.0) {
    ema_enc.emplace(enc_ps, cfg.ema_decay);
    ema_den.emplace(den_ps, cfg.ema_decay);
  }

  Rng rng(mix_seed(seed, 21));
  SdaeTrainReport report;
  report.seed = seed;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto last_good = model.to_checkpoint(0);
  const auto* cls_net = options.build_cls_term ? &cls.net() : nullptr;

  // linear warmup, then cosine decay to a tenth of the base rate
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const double total_steps = static_cast<double>(cfg.epochs) *
                             static_cast<double>((train.size() + bs - 1) / bs);
  const double warmup = std::min(200.0, 0.1 * total_steps);
  std::size_t step = 0;
  auto lr_at = [&](std::size_t s) {
    const double x = static_cast<double>(s);
    if (x < warmup) return cfg.lr * (x + 1.0) / warmup;
    const double progress = (x - warmup) / std::max(1.0, total_steps - warmup);
    return cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(M_PI * std::min(1.0, progress))));
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    double sum_diff = 0.0, sum_cls = 0.0, sum_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<const Image*> batch;
      Mat<float> p(classifier::kClasses, static_cast<Eigen::Index>(end - start));
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train[order[i]].image);
        p.col(static_cast<Eigen::Index>(i - start)) = probs[order[i]].col(0);
      }
      const Mat<float> x = stack_images<float>(batch);
      auto draw = draw_noise<float>(rng, p.cols(), x.rows(), x.cols(), cfg.T);
      // jitter the code so the denoiser also sees the space around each
      // training code; probability slots stay exact
      if (cfg.code_noise > 0.0) {
        draw.code_eps = Mat<float>::Zero(model.code_dim(), p.cols());
        for (Eigen::Index j = 0; j < p.cols(); ++j)
          for (int i = 0; i < cfg.d_z; ++i) draw.code_eps(i, j) = static_cast<float>(cfg.code_noise * rng.normal());
      }
      ad::Tape<float> t;
      auto terms = semantic_loss<float>(t, model.encoder(), model.denoiser(), cls_net, x, p, draw,
                                        model.schedule(), cfg.lambda1, cfg.x_prime, cfg.x_prime_steps);
      const double total = terms.total->value(0, 0);
      if (!std::isfinite(total)) {
        if (options.last_good_path) save_checkpoint(*options.last_good_path, last_good);
        throw TrainingError("semantic autoencoder training diverged at epoch " +
                            std::to_string(epoch + 1) + " (non-finite loss)");
      }
      t.backward(terms.total);
      opt_enc.set_lr(lr_at(step));
      opt_den.set_lr(lr_at(step));
      ++step;
      try {
        opt_enc.step();
        opt_den.step();
      } catch (const NumericError& e) {
        if (options.last_good_path) save_checkpoint(*options.last_good_path, last_good);
        throw TrainingError(std::string("semantic autoencoder training diverged: ") + e.what());
      }
      if (ema_enc) {
        ema_enc->update(enc_ps);
        ema_den->update(den_ps);
      }
      sum_diff += terms.diffusion->value(0, 0);
      sum_cls += terms.cls ? static_cast<double>(terms.cls->value(0, 0)) : 0.0;
      sum_total += total;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    report.diffusion_loss.push_back(sum_diff / nb);
    report.cls_loss.push_back(sum_cls / nb);
    report.total_loss.push_back(sum_total / nb);
    last_good = model.to_checkpoint(0);
    if (options.on_epoch) options.on_epoch(epoch + 1, sum_total / nb);
  }
  if (ema_enc) {
    ema_enc->copy_to(enc_ps);
    ema_den->copy_to(den_ps);
  }
  model.freeze();
  return {std::move(model), std::move(report)};
}

double diffusion_loss(const std::vector<const Image*>& batch, const SemanticAE& model,
                      const classifier::ClassifierModel& cls, const NoiseDraw<float>& draw) {
  const Mat<float> x = stack_images<float>(batch);
  const Mat<float> p = classifier_probs(cls, batch);
  ad::Tape<float> t(false);
  auto terms = semantic_loss<float>(t, model.encoder(), model.denoiser(), nullptr, x, p, draw,
                                    model.schedule(), 0.0);
  const double v = terms.diffusion->value(0, 0);
  if (!std::isfinite(v)) throw TrainingError("diffusion_loss: non-finite loss");
  return v;
}

double diffusion_loss(const std::vector<const Image*>& batch, const SemanticAE& model,
                      const classifier::ClassifierModel& cls, Rng& rng) {
  const Mat<float> x = stack_images<float>(batch);
  auto draw = draw_noise<float>(rng, static_cast<Eigen::Index>(batch.size()), x.rows(), x.cols(),
                                model.config().T);
  return diffusion_loss(batch, model, cls, draw);
}

double classifier_kl_loss(const std::vector<const Image*>& x_prime,
                          const std::vector<const Image*>& x,
                          const classifier::ClassifierModel& cls) {
  if (x_prime.size() != x.size()) throw InputError("classifier_kl_loss: batch size mismatch");
  return kl_divergence(cls.predict_probs(x_prime), cls.predict_probs(x));
}

}  // namespace diffex::semantic
