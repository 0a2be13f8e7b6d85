#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffex/checkpoint.hpp"
#include "diffex/datagen.hpp"
#include "diffex/nn.hpp"

namespace diffex::classifier {

inline constexpr int kClasses = 2;

struct ClassifierConfig {
  int width = 16;
  int feature_dim = 32;
  int epochs = 6;
  int batch_size = 32;
  double lr = 2e-3;
};

/// Small convolutional classifier: four 3x3 conv blocks (three strided),
/// global average pooling to `feature_dim` penultimate features, and a
/// linear head over two classes.  Inputs are images in [0,1].
template <typename S>
class ClassifierNet {
 public:
  ClassifierNet(int side, const ClassifierConfig& cfg, std::uint64_t seed) : side_(side) {
    Rng rng(seed);
    c1_ = nn::Conv2d<S>(params_, "conv1", 3, cfg.width, rng, 3, 1);
    c2_ = nn::Conv2d<S>(params_, "conv2", cfg.width, 2 * cfg.width, rng, 3, 2);
    c3_ = nn::Conv2d<S>(params_, "conv3", 2 * cfg.width, 2 * cfg.width, rng, 3, 2);
    c4_ = nn::Conv2d<S>(params_, "conv4", 2 * cfg.width, cfg.feature_dim, rng, 3, 2);
    head_ = nn::Linear<S>(params_, "head", cfg.feature_dim, kClasses, rng);
  }

  struct Outputs {
    ad::Var<S> features;  // (feature_dim x N)
    ad::Var<S> logits;    // (2 x N)
  };

  /// `images` is an image batch node (3 x N*side*side, height = width = side).
  Outputs forward(ad::Tape<S>& t, const ad::Var<S>& images) const {
    if (images->value.rows() != 3 || images->height != side_ || images->width != side_)
      throw InputError("classifier: expected 3-channel " + std::to_string(side_) + "x" +
                       std::to_string(side_) + " images");
    auto x = ad::add_scalar(t, ad::scale(t, images, S(2)), S(-1));
    x = ad::silu(t, c1_(t, x));
    x = ad::silu(t, c2_(t, x));
    x = ad::silu(t, c3_(t, x));
    x = ad::silu(t, c4_(t, x));
    auto features = ad::global_avg_pool(t, x);
    return {features, head_(t, features)};
  }

  nn::ParamSet<S>& params() { return params_; }
  const nn::ParamSet<S>& params() const { return params_; }
  int side() const { return side_; }
  int feature_dim() const { return head_.in_features(); }

 private:
  int side_;
  nn::ParamSet<S> params_;
  nn::Conv2d<S> c1_, c2_, c3_, c4_;
  nn::Linear<S> head_;
};

/// The frozen classifier C whose decisions are being explained.
class ClassifierModel {
 public:
  ClassifierModel(int side, const ClassifierConfig& cfg, std::uint64_t seed);

  /// Class probabilities, one column per image; images must be in [0,1].
  Mat<double> predict_probs(const std::vector<const Image*>& images) const;
  Mat<double> predict_probs(const Image& image) const;
  /// Penultimate features, one column per image.
  Mat<double> penult_features(const std::vector<const Image*>& images) const;

  ClassifierNet<float>& net() { return net_; }
  const ClassifierNet<float>& net() const { return net_; }
  const ClassifierConfig& config() const { return cfg_; }
  int side() const { return net_.side(); }
  int feature_dim() const { return net_.feature_dim(); }

  void freeze() {
    net_.params().freeze();
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }
  std::uint64_t checksum() const { return nn::checksum(net_.params()); }

  Checkpoint to_checkpoint(std::uint64_t config_hash) const;
  static ClassifierModel from_checkpoint(const Checkpoint& ckpt);

 private:
  Mat<float> checked_batch(const std::vector<const Image*>& images) const;

  ClassifierConfig cfg_;
  ClassifierNet<float> net_;
  bool frozen_ = false;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> val_accuracy;
  double test_accuracy = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

/// Trains on split.train (validation on split.val, final accuracy on
/// split.test) and returns the frozen model.  Throws InputError if the
/// training set does not contain both classes, TrainingError if the loss
/// becomes non-finite.
std::pair<ClassifierModel, TrainReport> train_classifier(const datagen::DatasetSplit& split,
                                                         const ClassifierConfig& cfg,
                                                         std::uint64_t seed,
                                                         std::uint64_t config_hash = 0);

double accuracy(const ClassifierModel& model, const std::vector<datagen::LabeledImage>& items);

}  // namespace diffex::classifier
