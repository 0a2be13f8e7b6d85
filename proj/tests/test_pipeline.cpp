#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "diffex/checkpoint.hpp"
#include "diffex/pipeline.hpp"
#include "diffex/ranking.hpp"
#include "tiny_config.hpp"
#include "tmpdir.hpp"

using namespace diffex;
using namespace diffex::pipeline;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("exit codes") {
  CHECK(exit_code_for(InputError("x")) == ExitCode::kValidation);
  CHECK(exit_code_for(DependencyError("discover", "x")) == ExitCode::kDependency);
  CHECK(exit_code_for(TrainingError("x")) == ExitCode::kDivergence);
  CHECK(exit_code_for(IoError("x")) == ExitCode::kIo);
}

TEST_CASE("missing upstream artifacts name the producing stage") {
  TempDir dir;
  const auto a = Artifacts::under(dir.path);
  const auto cfg = tiny_config();
  try {
    run_stage("train-classifier", cfg, a);
    FAIL("expected DependencyError");
  } catch (const DependencyError& e) {
    CHECK(e.stage() == "datagen");
  }
  run_stage("datagen", cfg, a);
  run_stage("train-classifier", cfg, a);
  run_stage("train-sdae", cfg, a);
  try {
    run_stage("rank", cfg, a);
    FAIL("expected DependencyError");
  } catch (const DependencyError& e) {
    CHECK(e.stage() == "discover");
  }
  // a changed classifier section invalidates the classifier checkpoint
  auto changed = cfg;
  changed.classifier.width = 5;
  try {
    run_stage("train-sdae", changed, a);
    FAIL("expected DependencyError");
  } catch (const DependencyError& e) {
    CHECK(e.stage() == "train-classifier");
  }
}

TEST_CASE("full run produces every artifact and a complete summary") {
  TempDir dir;
  const auto a = Artifacts::under(dir.path);
  run_all(tiny_config(), a);
  for (const auto& p : {a.classifier, a.sdae, a.bank, a.ranking, a.metrics, a.summary, a.manifest})
    CHECK(fs::exists(p));
  CHECK(fs::exists(a.explain / "witness.txt"));
  const auto s = build_summary(a);
  CHECK(s.missing.empty());
  CHECK(s.text.find("[incomplete]") == std::string::npos);
  const auto report = ranking::parse_report(slurp(a.ranking));
  CHECK(report.transitions.size() == 2);
  CHECK(ranking::format_report(report) == slurp(a.ranking));
  // no temp files anywhere
  for (const auto& e : fs::recursive_directory_iterator(dir.path))
    CHECK(e.path().filename().string().find(".tmp") == std::string::npos);

  SUBCASE("summary flags a missing stage") {
    fs::remove_all(a.explain);
    const auto flagged = build_summary(a);
    REQUIRE(flagged.missing.size() == 1);
    CHECK(flagged.text.find("MISSING") != std::string::npos);
    CHECK_THROWS_AS(write_summary(a), DependencyError);
    CHECK(slurp(a.summary).find("[incomplete]") != std::string::npos);
  }
}

TEST_CASE("run lock is exclusive") {
  TempDir dir;
  {
    RunLock lock(dir.path);
    CHECK_THROWS_AS(RunLock(dir.path), IoError);
  }
  RunLock again(dir.path);
}

TEST_CASE("identical config gives byte-identical reports") {
  TempDir d1, d2;
  run_all(tiny_config(), Artifacts::under(d1.path));
  run_all(tiny_config(), Artifacts::under(d2.path));
  for (const char* f : {"ranking.txt", "metrics.txt", "classifier.txt", "directions.txt"})
    CHECK(slurp(d1.path / f) == slurp(d2.path / f));
  CHECK(file_hash(d1.path / "sdae.ckpt") == file_hash(d2.path / "sdae.ckpt"));
}
