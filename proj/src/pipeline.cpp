#include "diffex/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "diffex/checkpoint.hpp"
#include "diffex/classifier.hpp"
#include "diffex/datagen.hpp"
#include "diffex/directions.hpp"
#include "diffex/explain.hpp"
#include "diffex/metrics.hpp"
#include "diffex/ranking.hpp"
#include "diffex/semantic_ae.hpp"

namespace diffex::pipeline {

using config::ExperimentConfig;
using config::stage_hash;

ExitCode exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DependencyError*>(&e)) return ExitCode::kDependency;
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const NumericError*>(&e))
    return ExitCode::kDivergence;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e))
    return ExitCode::kIo;
  if (dynamic_cast<const InputError*>(&e)) return ExitCode::kValidation;
  return ExitCode::kIo;
}

Artifacts Artifacts::under(const fs::path& root) {
  Artifacts a;
  a.root = root;
  a.data = root / "data";
  a.classifier = root / "classifier.ckpt";
  a.sdae = root / "sdae.ckpt";
  a.bank = root / "directions.ckpt";
  a.ranking = root / "ranking.txt";
  a.explain = root / "explain";
  a.metrics = root / "metrics.txt";
  a.summary = root / "summary.txt";
  a.manifest = root / "run_manifest.tsv";
  return a;
}

fs::path artifact_root(const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("DIFFEX_ARTIFACT_ROOT"); env && *env) return env;
  return "artifacts";
}

fs::path report_of(const fs::path& ckpt) {
  auto p = ckpt;
  return p.replace_extension(".txt");
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw IoError("artifact directory " + dir.string() + " is locked (" + path_.string() +
                  " exists; remove it if no other run is active)");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_sibling(const fs::path& p) {
  auto t = p;
  t += ".tmp." + std::to_string(::getpid());
  return t;
}

// Replaces directory `dst` by the fully written `tmp`.
void commit_dir(const fs::path& tmp, const fs::path& dst) {
  fs::remove_all(dst);
  fs::rename(tmp, dst);
}

constexpr const char* kStampFile = "STAGE";

datagen::DatasetSplit load_data(const fs::path& dir, const ExperimentConfig& cfg) {
  if (!fs::exists(dir / "manifest.tsv"))
    throw DependencyError("datagen", "missing dataset at " + dir.string() + "; run 'datagen' first");
  const std::uint64_t want = stage_hash(cfg, "datagen");
  if (fs::exists(dir / kStampFile)) {
    unsigned long long got = 0;
    if (std::sscanf(read_text(dir / kStampFile).c_str(), "datagen %llu", &got) != 1 || got != want)
      throw DependencyError("datagen", "dataset at " + dir.string() +
                                           " was generated under a different config; rerun 'datagen'");
  }
  return datagen::load_dataset(dir);
}

Checkpoint load_upstream(const fs::path& path, const std::string& ckpt_stage, const std::string& producer,
                         std::uint64_t want) {
  if (!fs::exists(path))
    throw DependencyError(producer, "missing " + path.string() + "; run '" + producer + "' first");
  try {
    return load_checkpoint(path, ckpt_stage, want);
  } catch (const InputError& e) {
    throw DependencyError(producer, std::string(e.what()) + "; rerun '" + producer + "'");
  }
}

classifier::ClassifierModel load_classifier(const fs::path& p, const ExperimentConfig& cfg) {
  return classifier::ClassifierModel::from_checkpoint(
      load_upstream(p, "classifier", "train-classifier", stage_hash(cfg, "train-classifier")));
}

semantic::SemanticAE load_sdae(const fs::path& p, const ExperimentConfig& cfg) {
  return semantic::SemanticAE::from_checkpoint(
      load_upstream(p, "sdae", "train-sdae", stage_hash(cfg, "train-sdae")));
}

directions::DirectionBank<float> load_bank(const fs::path& p, const ExperimentConfig& cfg) {
  return directions::bank_from_checkpoint(
      load_upstream(p, "directions", "discover", stage_hash(cfg, "discover")));
}

ranking::RankingReport load_ranking(const fs::path& p, const ExperimentConfig& cfg) {
  if (!fs::exists(p)) throw DependencyError("rank", "missing " + p.string() + "; run 'rank' first");
  auto r = ranking::parse_report(read_text(p));
  if (r.config_hash != stage_hash(cfg, "rank"))
    throw DependencyError("rank", p.string() + " was produced under a different config; rerun 'rank'");
  return r;
}

std::map<std::string, const datagen::LabeledImage*> index_by_id(const datagen::DatasetSplit& s) {
  std::map<std::string, const datagen::LabeledImage*> m;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& it : *part) m[it.id] = &it;
  return m;
}

std::string history(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt(x);
  return s;
}

void stage_datagen(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = datagen::generate_dataset(cfg.datagen, cfg.seed);
  log("datagen: " + std::to_string(split.train.size()) + "/" + std::to_string(split.val.size()) + "/" +
      std::to_string(split.test.size()) + " images");
  const fs::path tmp = temp_sibling(a.data);
  fs::remove_all(tmp);
  datagen::write_dataset(split, tmp);
  atomic_write(tmp / kStampFile, "datagen " + std::to_string(rec.config_hash) + "\n");
  commit_dir(tmp, a.data);
  rec.outputs.emplace_back(a.data / "manifest.tsv", file_hash(a.data / "manifest.tsv"));
}

void stage_classifier(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = load_data(a.data, cfg);
  rec.inputs.emplace_back(a.data / "manifest.tsv", file_hash(a.data / "manifest.tsv"));
  auto [model, rep] = classifier::train_classifier(split, cfg.classifier, mix_seed(cfg.seed, 1), rec.config_hash);
  log("classifier: test accuracy " + fmt(rep.test_accuracy));
  save_checkpoint(a.classifier, model.to_checkpoint(rec.config_hash));
  std::string text = "# diffex-classifier v1\n";
  text += "test_accuracy = " + fmt(rep.test_accuracy) + "\n";
  text += "val_accuracy = " + fmt(rep.val_accuracy.empty() ? 0.0 : rep.val_accuracy.back()) + "\n";
  text += "epoch_loss = " + history(rep.epoch_loss) + "\n";
  text += "checksum = " + std::to_string(model.checksum()) + "\n";
  atomic_write(report_of(a.classifier), text);
  rec.outputs.emplace_back(a.classifier, file_hash(a.classifier));
}

void stage_sdae(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = load_data(a.data, cfg);
  const auto cls = load_classifier(a.classifier, cfg);
  rec.inputs.emplace_back(a.classifier, file_hash(a.classifier));
  semantic::SdaeTrainOptions opt;
  auto last_good = a.sdae;
  last_good += ".last_good";
  opt.last_good_path = last_good;
  opt.on_epoch = [&](int epoch, double loss) {
    log("train-sdae: epoch " + std::to_string(epoch) + " loss " + fmt(loss));
  };
  auto [ae, rep] = semantic::train_semantic_ae(split, cls, cfg.sdae, mix_seed(cfg.seed, 2), opt);
  save_checkpoint(a.sdae, ae.to_checkpoint(rec.config_hash));
  std::string text = "# diffex-sdae v1\n";
  text += "diffusion_loss = " + history(rep.diffusion_loss) + "\n";
  text += "cls_loss = " + history(rep.cls_loss) + "\n";
  text += "total_loss = " + history(rep.total_loss) + "\n";
  atomic_write(report_of(a.sdae), text);
  rec.outputs.emplace_back(a.sdae, file_hash(a.sdae));
}

Mat<float> semantic_codes(const std::vector<datagen::LabeledImage>& items, const semantic::SemanticAE& ae,
                          const classifier::ClassifierModel& cls) {
  Mat<float> codes(ae.code_dim(), static_cast<Eigen::Index>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i)
    codes.col(static_cast<Eigen::Index>(i)) = ae.semantic_code(items[i].image, cls);
  return codes;
}

void stage_discover(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = load_data(a.data, cfg);
  const auto cls = load_classifier(a.classifier, cfg);
  const auto ae = load_sdae(a.sdae, cfg);
  rec.inputs.emplace_back(a.classifier, file_hash(a.classifier));
  rec.inputs.emplace_back(a.sdae, file_hash(a.sdae));
  const std::uint64_t before = ae.checksum() ^ cls.checksum();
  const Mat<float> codes = semantic_codes(split.train, ae, cls);
  directions::DirectionsTrainOptions opt;
  opt.on_epoch = [&](int epoch, double loss) {
    if (epoch % 5 == 0) log("discover: epoch " + std::to_string(epoch) + " loss " + fmt(loss));
  };
  auto [bank, rep] = directions::train_directions(codes, classifier::kClasses, cfg.directions,
                                                  mix_seed(cfg.seed, 3), opt);
  if ((ae.checksum() ^ cls.checksum()) != before)
    throw TrainingError("discover: frozen model parameters changed during direction training");
  save_checkpoint(a.bank, directions::bank_to_checkpoint(bank, classifier::kClasses, rec.config_hash));
  const double overlap = directions::mean_direction_overlap(bank, semantic_codes(split.test, ae, cls));
  std::string text = "# diffex-directions v1\n";
  text += "contrastive_loss = " + history(rep.contrastive_loss) + "\n";
  text += "reg_loss = " + history(rep.reg_loss) + "\n";
  text += "total_loss = " + history(rep.total_loss) + "\n";
  text += "mean_overlap = " + fmt(overlap) + "\n";
  atomic_write(report_of(a.bank), text);
  rec.outputs.emplace_back(a.bank, file_hash(a.bank));
}

void stage_rank(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = load_data(a.data, cfg);
  const auto cls = load_classifier(a.classifier, cfg);
  const auto ae = load_sdae(a.sdae, cfg);
  const auto bank = load_bank(a.bank, cfg);
  rec.inputs.emplace_back(a.bank, file_hash(a.bank));
  auto report = ranking::rank_all(ae, cls, bank, split, cfg.ranking);
  report.config_hash = rec.config_hash;
  for (const auto& tr : report.transitions)
    log("rank: " + std::to_string(tr.source_class) + " -> " + std::to_string(tr.target_class) + ": " +
        std::to_string(tr.selected.size()) + " directions selected");
  atomic_write(a.ranking, ranking::format_report(report));
  rec.outputs.emplace_back(a.ranking, file_hash(a.ranking));
}

void stage_explain(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = load_data(a.data, cfg);
  const auto report = load_ranking(a.ranking, cfg);
  const auto cls = load_classifier(a.classifier, cfg);
  const auto ae = load_sdae(a.sdae, cfg);
  const auto bank = load_bank(a.bank, cfg);
  rec.inputs.emplace_back(a.ranking, file_hash(a.ranking));
  const auto by_id = index_by_id(split);

  const fs::path tmp = temp_sibling(a.explain);
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  std::string text = "# diffex-explain v1\n";
  std::vector<double> alphas = cfg.explain.alphas;
  std::sort(alphas.begin(), alphas.end());

  for (const auto& tr : report.transitions) {
    std::vector<const Image*> pool;
    std::vector<std::string> ids;
    for (const auto& id : tr.pool_ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw InputError("ranking report names unknown image '" + id + "'");
      pool.push_back(&it->second->image);
      ids.push_back(id);
    }
    const std::string tag = std::to_string(tr.source_class) + "to" + std::to_string(tr.target_class);
    text += "\n[transition " + std::to_string(tr.source_class) + " -> " + std::to_string(tr.target_class) + "]\n";
    text += "selected = " + std::to_string(tr.selected.size()) + "\n";
    if (pool.empty() || tr.selected.empty()) continue;

    ranking::ModelEngine engine(ae, cls, bank, pool, report.config.n_steps);
    for (std::size_t r = 0; r < tr.selected.size(); ++r) {
      const auto& sel = tr.selected[r];
      std::vector<explain::CounterfactualResult> results;
      const std::size_t n_ex = std::min<std::size_t>(static_cast<std::size_t>(cfg.explain.n_examples), pool.size());
      for (std::size_t i = 0; i < n_ex; ++i)
        results.push_back(explain::generate_counterfactual(*pool[i], ids[i], ae, cls, bank, sel.k, sel.sign,
                                                           alphas, cfg.explain.n_steps));
      const std::string name = "grid_" + tag + "_r" + std::to_string(r + 1) + "_k" + std::to_string(sel.k) +
                               (sel.sign > 0 ? "pos" : "neg") + ".png";
      explain::emit_grid(results, tr.target_class, tmp / name);
      text += "grid " + std::to_string(r + 1) + " = " + name + "\n";
      if (r < 2) {
        const auto w = explain::evaluate_witness(engine, pool.size(), sel.k, sel.sign, sel.alpha, tr.target_class);
        text += "witness " + std::to_string(r + 1) + ": direction=" + std::to_string(sel.k) +
                " sign=" + (sel.sign > 0 ? "+" : "-") + " cytoplasm_fraction=" + fmt(w.cytoplasm_fraction) +
                " blob_fraction=" + fmt(w.blob_fraction) + " mean_delta=" + fmt(w.mean_delta) + "\n";
        log("explain: " + tag + " rank " + std::to_string(r + 1) + " witness " + fmt(w.best_fraction()));
      }
    }
    // trend of the top direction across the alpha sweep
    const auto& top = tr.selected.front();
    std::size_t monotone = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      double prev = -1.0;
      bool ok = true;
      for (double al : alphas) {
        const double p = engine.shifted_prob(i, top.k, top.sign * al, tr.target_class);
        ok &= p >= prev;
        prev = p;
      }
      monotone += ok;
    }
    text += "monotone_fraction = " + fmt(static_cast<double>(monotone) / static_cast<double>(pool.size())) + "\n";
  }
  atomic_write(tmp / "witness.txt", text);
  commit_dir(tmp, a.explain);
  rec.outputs.emplace_back(a.explain / "witness.txt", file_hash(a.explain / "witness.txt"));
}

void stage_metrics(const ExperimentConfig& cfg, const Artifacts& a, StageRecord& rec, const Log& log) {
  const auto split = load_data(a.data, cfg);
  const auto cls = load_classifier(a.classifier, cfg);
  const auto ae = load_sdae(a.sdae, cfg);
  rec.inputs.emplace_back(a.sdae, file_hash(a.sdae));
  const std::size_t n = std::min(split.test.size(), static_cast<std::size_t>(cfg.explain.metric_samples));
  if (n < 2) throw InputError("metrics: need at least 2 test images");
  std::vector<Image> rec_images;
  std::vector<const Image*> orig, recon;
  double s = 0, m = 0, p = 0;
  for (std::size_t i = 0; i < n; ++i) rec_images.push_back(ae.reconstruct(split.test[i].image, cls, cfg.explain.n_steps));
  for (std::size_t i = 0; i < n; ++i) {
    const Image& x = split.test[i].image;
    s += metrics::ssim(x, rec_images[i]);
    m += metrics::mse(x, rec_images[i]);
    p += metrics::perceptual_distance(x, rec_images[i], cls);
    orig.push_back(&x);
    recon.push_back(&rec_images[i]);
  }
  const double dn = static_cast<double>(n);
  // raw penultimate features are O(10) per dimension, which puts the cubic
  // kernel at ~1e5 and drowns the estimate; score at unit scale instead
  const Mat<double> f_orig = cls.penult_features(orig).transpose();
  const double kid = metrics::kid(metrics::standardize_like(f_orig, f_orig),
                                  metrics::standardize_like(f_orig, cls.penult_features(recon).transpose()));
  const double agree = metrics::agreement(orig, recon, cls);
  std::string text = "# diffex-metrics v1\n";
  text += "n_samples = " + std::to_string(n) + "\n";
  text += "ssim = " + fmt(s / dn) + "\n";
  text += "mse = " + fmt(m / dn) + "\n";
  text += "perceptual = " + fmt(p / dn) + "\n";
  text += "kid = " + fmt(kid) + "\n";
  text += "agreement = " + fmt(agree) + "\n";
  log("metrics: ssim " + fmt(s / dn) + " mse " + fmt(m / dn) + " agreement " + fmt(agree));
  atomic_write(a.metrics, text);
  rec.outputs.emplace_back(a.metrics, file_hash(a.metrics));
}

}  // namespace

StageRecord run_stage(const std::string& stage, const ExperimentConfig& cfg, const Artifacts& a, const Log& log_in) {
  if (auto errs = config::validate(cfg); !errs.empty()) throw config::ConfigError(errs);
  const Log log = log_in ? log_in : [](const std::string&) {};
  StageRecord rec;
  rec.stage = stage;
  rec.seed = cfg.seed;
  rec.config_hash = stage_hash(cfg, stage);
  const auto t0 = std::chrono::steady_clock::now();
  if (stage == "datagen") stage_datagen(cfg, a, rec, log);
  else if (stage == "train-classifier") stage_classifier(cfg, a, rec, log);
  else if (stage == "train-sdae") stage_sdae(cfg, a, rec, log);
  else if (stage == "discover") stage_discover(cfg, a, rec, log);
  else if (stage == "rank") stage_rank(cfg, a, rec, log);
  else if (stage == "explain") stage_explain(cfg, a, rec, log);
  else if (stage == "metrics") stage_metrics(cfg, a, rec, log);
  else throw InputError("unknown stage '" + stage + "'");
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void record_stage(const Artifacts& a, const StageRecord& rec) {
  std::string text;
  if (fs::exists(a.manifest)) text = read_text(a.manifest);
  else text = "stage\tseconds\tseed\tconfig_hash\tinputs\toutputs\n";
  auto join = [](const auto& v) {
    std::string s;
    for (const auto& [path, h] : v) s += (s.empty() ? "" : ",") + path + "=" + std::to_string(h);
    return s.empty() ? std::string("-") : s;
  };
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.3f", rec.seconds);
  text += rec.stage + "\t" + secs + "\t" + std::to_string(rec.seed) + "\t" + std::to_string(rec.config_hash) +
          "\t" + join(rec.inputs) + "\t" + join(rec.outputs) + "\n";
  fs::create_directories(a.manifest.parent_path().empty() ? "." : a.manifest.parent_path());
  atomic_write(a.manifest, text);
}

void run_all(const ExperimentConfig& cfg, const Artifacts& a, const Log& log) {
  fs::create_directories(a.root);
  config::write_config(a.root / "config.json", cfg);
  for (const auto& stage : config::stage_names()) {
    if (log) log("== " + stage);
    record_stage(a, run_stage(stage, cfg, a, log));
  }
  write_summary(a);
}

std::vector<std::pair<std::string, std::string>> read_key_values(const fs::path& path) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in(read_text(path));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    kv.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  return kv;
}

Summary build_summary(const Artifacts& a) {
  Summary s;
  std::string& t = s.text;
  t = "# diffex-summary v1\n";
  auto section = [&](const std::string& name, const std::string& stage, const fs::path& file,
                     const std::vector<std::string>& keys) {
    t += "\n[" + name + "]\n";
    if (!fs::exists(file)) {
      t += "status = MISSING (run '" + stage + "')\n";
      s.missing.push_back(stage);
      return;
    }
    t += "source = " + file.string() + "\n";
    for (const auto& [k, v] : read_key_values(file))
      if (keys.empty() || std::find(keys.begin(), keys.end(), k) != keys.end()) t += k + " = " + v + "\n";
  };
  section("datagen", "datagen", a.data / "manifest.tsv", {"split_seed"});
  if (fs::exists(a.data / "manifest.tsv")) {
    std::ifstream in(a.data / "manifest.tsv");
    std::map<std::string, int> counts;
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string id, path, split;
      ls >> id >> path >> split;
      if (split == "train" || split == "val" || split == "test") ++counts[split];
    }
    for (const auto& [k, v] : counts) t += "n_" + k + " = " + std::to_string(v) + "\n";
  }
  section("classifier", "train-classifier", report_of(a.classifier), {"test_accuracy", "val_accuracy"});
  section("reconstruction", "metrics", a.metrics, {});
  section("directions", "rank", a.ranking, {"alpha_rank", "tau_rank", "target_class"});
  if (fs::exists(a.ranking)) {
    std::ifstream in(a.ranking);
    for (std::string line; std::getline(in, line);)
      if (line.rfind("[transition", 0) == 0 || line.rfind("rank ", 0) == 0) t += line + "\n";
  }
  section("explain", "explain", a.explain / "witness.txt", {"none"});
  if (fs::exists(a.explain / "witness.txt")) {
    std::ifstream in(a.explain / "witness.txt");
    for (std::string line; std::getline(in, line);)
      if (!line.empty() && line[0] != '#') t += line + "\n";
  }
  if (!s.missing.empty()) {
    t += "\n[incomplete]\nmissing =";
    for (const auto& m : s.missing) t += " " + m;
    t += "\n";
  }
  return s;
}

void write_summary(const Artifacts& a) {
  const Summary s = build_summary(a);
  fs::create_directories(a.summary.parent_path().empty() ? "." : a.summary.parent_path());
  atomic_write(a.summary, s.text);
  if (!s.missing.empty()) {
    std::string list;
    for (const auto& m : s.missing) list += (list.empty() ? "" : ", ") + m;
    throw DependencyError(s.missing.front(), "pipeline incomplete; missing stages: " + list);
  }
}

}  // namespace diffex::pipeline
