#include "diffex/directions.hpp"

#include <cmath>
#include <numeric>

namespace diffex::directions {

std::pair<DirectionBank<float>, DirectionsTrainReport> train_directions(
    const Mat<float>& codes, int n_classes, const DirectionsConfig& cfg, std::uint64_t seed,
    const DirectionsTrainOptions& options) {
  if (codes.cols() < 2) throw InputError("train_directions: need at least two codes");
  if (cfg.lambda2 < 0.0) throw InputError("train_directions: lambda2 must be >= 0");
  if (!(cfg.alpha_min > 0.0 && cfg.alpha_min <= cfg.alpha_max))
    throw InputError("train_directions: need 0 < alpha_min <= alpha_max");
  DirectionBank<float> bank(static_cast<int>(codes.rows()), n_classes, cfg, mix_seed(seed, 31));
  nn::Adam<float> opt(bank.params(), {.lr = cfg.lr, .clip_norm = 5.0});
  Rng rng(mix_seed(seed, 32));

  DirectionsTrainReport report;
  report.seed = seed;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(codes.cols()));
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(std::max(2, cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    double sum_c = 0.0, sum_r = 0.0, sum_t = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      if (end - start < 2) break;
      Mat<float> z(codes.rows(), static_cast<Eigen::Index>(end - start));
      for (std::size_t i = start; i < end; ++i) z.col(static_cast<Eigen::Index>(i - start)) = codes.col(order[i]);
      const Mat<float> alphas = sample_alphas<float>(rng, z.cols(), cfg.K, cfg.alpha_min, cfg.alpha_max);
      ad::Tape<float> t;
      auto loss = direction_loss<float>(t, bank, z, alphas, cfg.lambda2, options.build_reg_term);
      const double total = loss.total->value(0, 0);
      if (!std::isfinite(total))
        throw TrainingError("direction training diverged at epoch " + std::to_string(epoch + 1));
      t.backward(loss.total);
      try {
        opt.step();
      } catch (const NumericError& e) {
        throw TrainingError(std::string("direction training diverged: ") + e.what());
      }
      sum_c += loss.contrastive->value(0, 0);
      sum_r += loss.reg ? static_cast<double>(loss.reg->value(0, 0)) : 0.0;
      sum_t += total;
      ++batches;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    report.contrastive_loss.push_back(sum_c / nb);
    report.reg_loss.push_back(sum_r / nb);
    report.total_loss.push_back(sum_t / nb);
    if (options.on_epoch) options.on_epoch(epoch + 1, sum_t / nb);
  }
  bank.params().freeze();
  return {std::move(bank), std::move(report)};
}

double mean_direction_overlap(const DirectionBank<float>& bank, const Mat<float>& codes) {
  ad::Tape<float> t(false);
  auto z = t.constant(codes);
  std::vector<Mat<float>> units;
  for (int k = 0; k < bank.K(); ++k) units.push_back(bank.unit_direction(t, k, z)->value);
  double sum = 0.0;
  std::size_t count = 0;
  for (int a = 0; a < bank.K(); ++a)
    for (int b = a + 1; b < bank.K(); ++b) {
      const Eigen::ArrayXf cos = units[static_cast<std::size_t>(a)]
                                     .cwiseProduct(units[static_cast<std::size_t>(b)])
                                     .colwise()
                                     .sum()
                                     .transpose()
                                     .array();
      sum += cos.abs().cast<double>().mean();
      ++count;
    }
  return count ? sum / static_cast<double>(count) : 0.0;
}

Checkpoint bank_to_checkpoint(const DirectionBank<float>& bank, int n_classes,
                              std::uint64_t config_hash) {
  const auto& cfg = bank.config();
  Checkpoint c;
  c.stage = "directions";
  c.config_hash = config_hash;
  char buf[64];
  auto put = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    c.metadata[key] = buf;
  };
  c.metadata["code_dim"] = std::to_string(bank.code_dim());
  c.metadata["n_classes"] = std::to_string(n_classes);
  c.metadata["K"] = std::to_string(cfg.K);
  c.metadata["d_f"] = std::to_string(cfg.d_f);
  c.metadata["hidden"] = std::to_string(cfg.hidden);
  c.metadata["encoder_only"] = cfg.encoder_only ? "1" : "0";
  put("tau", cfg.tau);
  put("lambda2", cfg.lambda2);
  put("alpha_min", cfg.alpha_min);
  put("alpha_max", cfg.alpha_max);
  for (const auto& [name, m] : bank.params().snapshot()) c.tensors.emplace_back("bank." + name, m);
  return c;
}

DirectionBank<float> bank_from_checkpoint(const Checkpoint& ckpt) {
  DirectionsConfig cfg;
  cfg.K = std::stoi(ckpt.meta("K"));
  cfg.d_f = std::stoi(ckpt.meta("d_f"));
  cfg.hidden = std::stoi(ckpt.meta("hidden"));
  cfg.encoder_only = ckpt.meta("encoder_only") == "1";
  cfg.tau = std::stod(ckpt.meta("tau"));
  cfg.lambda2 = std::stod(ckpt.meta("lambda2"));
  cfg.alpha_min = std::stod(ckpt.meta("alpha_min"));
  cfg.alpha_max = std::stod(ckpt.meta("alpha_max"));
  DirectionBank<float> bank(std::stoi(ckpt.meta("code_dim")), std::stoi(ckpt.meta("n_classes")), cfg, 0);
  bank.params().assign_from(ckpt.group("bank."));
  bank.params().freeze();
  return bank;
}

}  // namespace diffex::directions
