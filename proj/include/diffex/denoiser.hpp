#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diffex/nn.hpp"

namespace diffex::diffusion {

struct DenoiserConfig {
  int base_channels = 16;
  int emb_dim = 64;
  int cond_dim = 66;  // semantic code dimension
  int side = 64;
};

/// Sinusoidal timestep features, one column per entry of `steps`.
template <typename S>
Mat<S> timestep_features(const std::vector<int>& steps, int dim) {
  const int half = dim / 2;
  Mat<S> out(dim, static_cast<Eigen::Index>(steps.size()));
  for (std::size_t j = 0; j < steps.size(); ++j)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out(i, static_cast<Eigen::Index>(j)) = static_cast<S>(std::sin(steps[j] * freq));
      out(half + i, static_cast<Eigen::Index>(j)) = static_cast<S>(std::cos(steps[j] * freq));
    }
  return out;
}

/// Conditional U-Net noise predictor eps(x_t, t, z_sem).  Three resolution
/// levels below the input, skip connections by channel concatenation, and
/// a per-stage scale/shift computed from emb(t) + emb(z_sem).
template <typename S>
class DenoiserNet {
 public:
  DenoiserNet(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    const int c = cfg.base_channels, e = cfg.emb_dim;
    auto& ps = params_;
    t_mlp1_ = nn::Linear<S>(ps, "temb.fc1", e, e, rng);
    t_mlp2_ = nn::Linear<S>(ps, "temb.fc2", e, e, rng);
    z_emb_ = nn::Linear<S>(ps, "zemb", cfg.cond_dim, e, rng);
    in_ = nn::Conv2d<S>(ps, "in", 3, c, rng);
    b1_ = nn::Conv2d<S>(ps, "b1", c, c, rng);
    d1_ = nn::Conv2d<S>(ps, "d1", c, 2 * c, rng, 3, 2);
    b2_ = nn::Conv2d<S>(ps, "b2", 2 * c, 2 * c, rng);
    d2_ = nn::Conv2d<S>(ps, "d2", 2 * c, 4 * c, rng, 3, 2);
    b3_ = nn::Conv2d<S>(ps, "b3", 4 * c, 4 * c, rng);
    d3_ = nn::Conv2d<S>(ps, "d3", 4 * c, 4 * c, rng, 3, 2);
    mid_ = nn::Conv2d<S>(ps, "mid", 4 * c, 4 * c, rng);
    u3_ = nn::Conv2d<S>(ps, "u3", 8 * c, 4 * c, rng);
    u2_ = nn::Conv2d<S>(ps, "u2", 6 * c, 2 * c, rng);
    u1_ = nn::Conv2d<S>(ps, "u1", 3 * c, c, rng);
    out_ = nn::Conv2d<S>(ps, "out", c, 3, rng, 3, 1, 0.0);
    const int widths[kStages] = {c, 2 * c, 4 * c, 4 * c, 4 * c, 2 * c, c};
    for (int i = 0; i < kStages; ++i)
      film_[i] = nn::Linear<S>(ps, "film" + std::to_string(i), e, 2 * widths[i], rng, 0.1);
  }

  /// x_t: image batch node (3 x N*side*side); steps: N timesteps;
  /// z_sem: (cond_dim x N).
  ad::Var<S> forward(ad::Tape<S>& t, const ad::Var<S>& x_t, const std::vector<int>& steps,
                     const ad::Var<S>& z_sem) const {
    if (x_t->value.rows() != 3 || x_t->height != cfg_.side || x_t->width != cfg_.side)
      throw InputError("denoiser: expected 3-channel " + std::to_string(cfg_.side) + "px images");
    if (static_cast<Eigen::Index>(steps.size()) != x_t->samples() ||
        z_sem->value.cols() != x_t->samples() || z_sem->value.rows() != cfg_.cond_dim)
      throw InputError("denoiser: batch/conditioning shape mismatch");

    auto temb = t.constant(timestep_features<S>(steps, cfg_.emb_dim));
    temb = t_mlp2_(t, ad::silu(t, t_mlp1_(t, temb)));
    auto emb = ad::silu(t, ad::add(t, temb, z_emb_(t, z_sem)));

    int stage = 0;
    auto block = [&](const nn::Conv2d<S>& conv, const ad::Var<S>& h) {
      auto y = conv(t, h);
      auto ss = film_[stage++](t, emb);
      const auto ch = y->value.rows();
      y = ad::modulate(t, y, ad::slice_rows(t, ss, 0, ch), ad::slice_rows(t, ss, ch, ch));
      return ad::silu(t, y);
    };

    auto h = in_(t, x_t);
    auto s1 = block(b1_, h);
    auto s2 = block(b2_, ad::silu(t, d1_(t, s1)));
    auto s3 = block(b3_, ad::silu(t, d2_(t, s2)));
    auto m = block(mid_, ad::silu(t, d3_(t, s3)));
    auto u = block(u3_, ad::concat_channels(t, ad::upsample2x(t, m), s3));
    u = block(u2_, ad::concat_channels(t, ad::upsample2x(t, u), s2));
    u = block(u1_, ad::concat_channels(t, ad::upsample2x(t, u), s1));
    return out_(t, u);
  }

  /// Inference helper over plain matrices.
  Mat<S> predict(const Mat<S>& x_t, int step, const Mat<S>& z_sem) const {
    ad::Tape<S> t(false);
    const auto n = static_cast<std::size_t>(z_sem.cols());
    return forward(t, t.constant(x_t, cfg_.side, cfg_.side), std::vector<int>(n, step),
                   t.constant(z_sem))
        ->value;
  }

  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }
  const DenoiserConfig& config() const { return cfg_; }

 private:
  static constexpr int kStages = 7;
  DenoiserConfig cfg_;
  nn::ParamSet<S> params_;
  nn::Linear<S> t_mlp1_, t_mlp2_, z_emb_;
  nn::Conv2d<S> in_, b1_, d1_, b2_, d2_, b3_, d3_, mid_, u3_, u2_, u1_, out_;
  nn::Linear<S> film_[kStages];
};

}  // namespace diffex::diffusion
