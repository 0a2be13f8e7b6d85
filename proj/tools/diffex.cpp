// diffex: single entry point for every pipeline stage.
//
// Exit codes: 0 ok, 1 invalid input/config, 2 missing or stale upstream
// stage, 3 training divergence, 4 I/O.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "diffex/config.hpp"
#include "diffex/pipeline.hpp"

namespace fs = std::filesystem;
using namespace diffex;

namespace {

struct Paths {
  std::string data, classifier, sdae, bank, ranking, explain, metrics;
  std::string out;
};

void log_line(const std::string& s) { std::fprintf(stderr, "[diffex] %s\n", s.c_str()); }

config::ExperimentConfig load_config(const std::string& flag, const fs::path& root) {
  if (!flag.empty()) return config::parse_config(flag);
  if (fs::exists(root / "config.json")) return config::parse_config(root / "config.json");
  return config::ExperimentConfig{};
}

void override(fs::path& slot, const std::string& v) {
  if (!v.empty()) slot = v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffex: counterfactual directions for image classifiers"};
  app.require_subcommand(1);
  std::string root_flag, config_flag;
  bool quiet = false;
  app.add_option("--artifacts", root_flag, "Artifact directory (default $DIFFEX_ARTIFACT_ROOT or ./artifacts)");
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  Paths p;
  std::optional<std::uint64_t> seed_flag;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_flag, "Experiment config (JSON)");
    sub->add_option("--seed", seed_flag, "Override the config's master seed (use the same value for every stage)");
  };

  auto* datagen = app.add_subcommand("datagen", "Render the synthetic dataset");
  with_config(datagen);
  datagen->add_option("--out", p.out, "Dataset directory");

  auto* train_cls = app.add_subcommand("train-classifier", "Train and freeze the classifier");
  with_config(train_cls);
  train_cls->add_option("--data", p.data);
  train_cls->add_option("--out", p.out, "Classifier checkpoint");

  auto* train_sdae = app.add_subcommand("train-sdae", "Train the semantic diffusion autoencoder");
  with_config(train_sdae);
  train_sdae->add_option("--data", p.data);
  train_sdae->add_option("--classifier", p.classifier);
  train_sdae->add_option("--out", p.out, "Autoencoder checkpoint");

  auto* discover = app.add_subcommand("discover", "Learn latent directions");
  with_config(discover);
  discover->add_option("--sdae", p.sdae);
  discover->add_option("--classifier", p.classifier);
  discover->add_option("--data", p.data);
  discover->add_option("--out", p.out, "Direction bank checkpoint");

  auto* rank = app.add_subcommand("rank", "Rank directions by classifier effect");
  with_config(rank);
  rank->add_option("--bank", p.bank);
  rank->add_option("--sdae", p.sdae);
  rank->add_option("--classifier", p.classifier);
  rank->add_option("--data", p.data);
  rank->add_option("--out", p.out, "Ranking report");

  auto* explain = app.add_subcommand("explain", "Render counterfactual grids for ranked directions");
  with_config(explain);
  explain->add_option("--rank", p.ranking);
  explain->add_option("--data", p.data);
  explain->add_option("--bank", p.bank);
  explain->add_option("--sdae", p.sdae);
  explain->add_option("--classifier", p.classifier);
  explain->add_option("--out", p.out, "Output directory");

  auto* metrics = app.add_subcommand("metrics", "Reconstruction metrics on the test split");
  with_config(metrics);
  metrics->add_option("--data", p.data);
  metrics->add_option("--sdae", p.sdae);
  metrics->add_option("--classifier", p.classifier);
  metrics->add_option("--out", p.out, "Metrics report");

  auto* report = app.add_subcommand("report", "Write summary.txt from finished stages");
  report->add_option("--out", p.out, "Summary file");

  auto* run_all = app.add_subcommand("run-all", "Run every stage in order");
  with_config(run_all);

  auto* show = app.add_subcommand("print-config", "Print the effective config as JSON");
  with_config(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(pipeline::ExitCode::kValidation);
  }

  try {
    const fs::path root = pipeline::artifact_root(root_flag.empty() ? std::nullopt : std::optional<fs::path>(root_flag));
    auto a = pipeline::Artifacts::under(root);
    override(a.data, p.data);
    override(a.classifier, p.classifier);
    override(a.sdae, p.sdae);
    override(a.bank, p.bank);
    override(a.ranking, p.ranking);
    const pipeline::Log log = quiet ? pipeline::Log{} : pipeline::Log{log_line};
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    if (name == "report") {
      override(a.summary, p.out);
      pipeline::write_summary(a);
      std::cout << a.summary.string() << "\n";
      return 0;
    }
    auto cfg = load_config(config_flag, root);
    if (seed_flag) cfg.seed = *seed_flag;
    if (name == "print-config") {
      std::cout << config::to_json(cfg);
      return 0;
    }
    fs::create_directories(root);
    pipeline::RunLock lock(root);
    if (name == "run-all") {
      pipeline::run_all(cfg, a, log);
      std::cout << a.summary.string() << "\n";
      return 0;
    }
    if (!p.out.empty()) {
      if (name == "datagen") a.data = p.out;
      else if (name == "train-classifier") a.classifier = p.out;
      else if (name == "train-sdae") a.sdae = p.out;
      else if (name == "discover") a.bank = p.out;
      else if (name == "rank") a.ranking = p.out;
      else if (name == "explain") a.explain = p.out;
      else if (name == "metrics") a.metrics = p.out;
    }
    pipeline::record_stage(a, pipeline::run_stage(name, cfg, a, log));
    return 0;
  } catch (const DependencyError& e) {
    std::fprintf(stderr, "diffex: dependency error (stage '%s'): %s\n", e.stage().c_str(), e.what());
    return static_cast<int>(pipeline::ExitCode::kDependency);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "diffex: error: %s\n", e.what());
    return static_cast<int>(pipeline::exit_code_for(e));
  }
}
