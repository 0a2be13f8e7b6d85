#include <string>

#include "doctest.h"
#include "diffex/config.hpp"
#include "tiny_config.hpp"
#include "tmpdir.hpp"

using namespace diffex;
using namespace diffex::config;

namespace {

std::vector<std::string> errors_of(const std::string& json) {
  try {
    parse_config_text(json);
  } catch (const ConfigError& e) {
    return e.errors();
  }
  return {};
}

bool any_contains(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("defaults validate and round trip") {
  ExperimentConfig c;
  CHECK(validate(c).empty());
  CHECK(parse_config_text(to_json(c)) == c);
  const auto tiny = tiny_config();
  CHECK(parse_config_text(to_json(tiny)) == tiny);
  CHECK(to_json(parse_config_text(to_json(tiny))) == to_json(tiny));

  TempDir dir;
  write_config(dir.path / "c.json", tiny);
  CHECK(parse_config(dir.path / "c.json") == tiny);
}

TEST_CASE("range violations name the field") {
  const auto errs = errors_of(R"({"schema_version":1,"seed":1,"directions":{"tau":-1}})");
  REQUIRE(errs.size() == 1);
  CHECK(errs[0].find("directions.tau") != std::string::npos);
}

TEST_CASE("all errors reported at once") {
  const auto errs = errors_of(R"({"schema_version":1,"seed":1,"directions":{"tau":-1,"K":0},"sdae":{"T":0}})");
  CHECK(errs.size() >= 3);
  CHECK(any_contains(errs, "directions.K"));
  CHECK(any_contains(errs, "sdae.T"));
}

TEST_CASE("unknown keys get a suggestion") {
  const auto errs = errors_of(R"({"schema_version":1,"seed":1,"directions":{"taus":0.5}})");
  REQUIRE(errs.size() == 1);
  CHECK(errs[0].find("directions.taus") != std::string::npos);
  CHECK(errs[0].find("directions.tau") != std::string::npos);
  CHECK(suggest_key("direction.K") == "directions.K");
  CHECK(suggest_key("completely_unrelated_thing").empty());
  CHECK(edit_distance("kitten", "sitting") == 3);
}

TEST_CASE("required fields, types and cross-field rules") {
  CHECK(any_contains(errors_of(R"({"seed":1})"), "schema_version"));
  CHECK(any_contains(errors_of(R"({"schema_version":1})"), "seed"));
  CHECK(any_contains(errors_of(R"({"schema_version":2,"seed":1})"), "schema_version"));
  CHECK(any_contains(errors_of(R"({"schema_version":1,"seed":1,"sdae":{"T":"big"}})"), "sdae.T"));
  CHECK(any_contains(errors_of(R"({"schema_version":1,"seed":1,"explain":{"alphas":[1,2]}})"), "explain.alphas"));
  CHECK(any_contains(errors_of(R"({"schema_version":1,"seed":1,"directions":{"alpha_min":4,"alpha_max":3}})"),
                     "alpha_min"));
  CHECK(any_contains(errors_of(R"({"schema_version":1,"seed":1,"sdae":{"beta_end":0.9,"T":5000}})"), "sdae.beta_end"));
  CHECK_THROWS_AS(parse_config_text("{not json"), InputError);
}

TEST_CASE("stage hashes depend only on upstream sections") {
  const ExperimentConfig a = tiny_config();
  ExperimentConfig b = a;
  b.ranking.tau_rank = 0.3;
  CHECK(stage_hash(a, "train-classifier") == stage_hash(b, "train-classifier"));
  CHECK(stage_hash(a, "discover") == stage_hash(b, "discover"));
  CHECK(stage_hash(a, "rank") != stage_hash(b, "rank"));
  b = a;
  b.seed = 6;
  for (const auto& s : stage_names()) CHECK(stage_hash(a, s) != stage_hash(b, s));
}
