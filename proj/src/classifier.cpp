#include "diffex/classifier.hpp"

#include <cmath>
#include <numeric>

namespace diffex::classifier {

ClassifierModel::ClassifierModel(int side, const ClassifierConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), net_(side, cfg, seed) {}

Mat<float> ClassifierModel::checked_batch(const std::vector<const Image*>& images) const {
  if (images.empty()) throw InputError("classifier: empty batch");
  for (const auto* im : images)
    if (im->channels() != 3 || im->side != side())
      throw InputError("classifier: expected 3-channel " + std::to_string(side()) + "x" +
                       std::to_string(side()) + " images");
  return stack_images<float>(images);
}

Mat<double> ClassifierModel::predict_probs(const std::vector<const Image*>& images) const {
  ad::Tape<float> t(false);
  auto x = t.constant(checked_batch(images), side(), side());
  auto out = net_.forward(t, x);
  Mat<double> logits = out.logits->value.cast<double>();
  return ad::softmax_cols_value<double>(logits);
}

Mat<double> ClassifierModel::predict_probs(const Image& image) const {
  return predict_probs(std::vector<const Image*>{&image});
}

Mat<double> ClassifierModel::penult_features(const std::vector<const Image*>& images) const {
  ad::Tape<float> t(false);
  auto x = t.constant(checked_batch(images), side(), side());
  return net_.forward(t, x).features->value.cast<double>();
}

Checkpoint ClassifierModel::to_checkpoint(std::uint64_t config_hash) const {
  Checkpoint c;
  c.stage = "classifier";
  c.config_hash = config_hash;
  c.metadata["side"] = std::to_string(side());
  c.metadata["width"] = std::to_string(cfg_.width);
  c.metadata["feature_dim"] = std::to_string(cfg_.feature_dim);
  for (const auto& [name, m] : net_.params().snapshot()) c.tensors.emplace_back("net." + name, m);
  return c;
}

ClassifierModel ClassifierModel::from_checkpoint(const Checkpoint& ckpt) {
  ClassifierConfig cfg;
  cfg.width = std::stoi(ckpt.meta("width"));
  cfg.feature_dim = std::stoi(ckpt.meta("feature_dim"));
  ClassifierModel m(std::stoi(ckpt.meta("side")), cfg, 0);
  m.net_.params().assign_from(ckpt.group("net."));
  m.freeze();
  return m;
}

double accuracy(const ClassifierModel& model, const std::vector<datagen::LabeledImage>& items) {
  if (items.empty()) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < items.size(); start += kChunk) {
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < std::min(items.size(), start + kChunk); ++i)
      batch.push_back(&items[i].image);
    const Mat<double> p = model.predict_probs(batch);
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      Eigen::Index arg;
      p.col(j).maxCoeff(&arg);
      if (static_cast<int>(arg) == items[start + j].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

std::pair<ClassifierModel, TrainReport> train_classifier(const datagen::DatasetSplit& split,
                                                         const ClassifierConfig& cfg,
                                                         std::uint64_t seed,
                                                         std::uint64_t config_hash) {
  const auto& train = split.train;
  if (train.empty()) throw InputError("train_classifier: empty training split");
  int per_class[kClasses] = {0, 0};
  for (const auto& li : train) ++per_class[li.label];
  if (per_class[0] == 0 || per_class[1] == 0)
    throw InputError("train_classifier: training split contains a single class; the classifier "
                     "would be degenerate");

  const int side = train.front().image.side;
  ClassifierModel model(side, cfg, mix_seed(seed, 1));
  auto& params = model.net().params();
  nn::Adam<float> opt(params, {.lr = cfg.lr, .clip_norm = 5.0});
  Rng rng(mix_seed(seed, 2));

  TrainReport report;
  report.seed = seed;
  report.config_hash = config_hash;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Image*> batch;
      Mat<float> onehot = Mat<float>::Zero(kClasses, static_cast<Eigen::Index>(end - start));
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train[order[i]].image);
        onehot(train[order[i]].label, static_cast<Eigen::Index>(i - start)) = 1.0f;
      }
      ad::Tape<float> t;
      auto x = t.constant(stack_images<float>(batch), side, side);
      auto out = model.net().forward(t, x);
      auto logp = ad::log_softmax_cols(t, out.logits);
      auto loss = ad::scale(t, ad::sum(t, ad::mul(t, logp, t.constant(onehot))),
                            -1.0f / static_cast<float>(end - start));
      const double lv = loss->value(0, 0);
      if (!std::isfinite(lv))
        throw TrainingError("classifier training diverged at epoch " + std::to_string(epoch + 1) +
                            " (loss " + std::to_string(lv) + ")");
      t.backward(loss);
      opt.step();
      loss_sum += lv;
      ++batches;
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    report.val_accuracy.push_back(split.val.empty() ? 0.0 : accuracy(model, split.val));
  }
  model.freeze();
  report.test_accuracy = split.test.empty() ? 0.0 : accuracy(model, split.test);
  return {std::move(model), std::move(report)};
}

}  // namespace diffex::classifier
