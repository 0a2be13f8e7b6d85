#include <fstream>
#include <sstream>

#include "doctest.h"
#include "diffex/checkpoint.hpp"
#include "diffex/explain.hpp"
#include "diffex/pipeline.hpp"
#include "diffex/ranking.hpp"
#include "tmpdir.hpp"

using namespace diffex;

namespace {

explain::CounterfactualResult fake_result(const std::string& id, int k, int sign) {
  explain::CounterfactualResult r;
  r.source_id = id;
  r.k = k;
  r.sign = sign;
  r.alphas = {0, 1.5, 3};
  r.probs = Mat<double>(2, 3);
  r.probs << 0.9, 0.5, 0.123, 0.1, 0.5, 0.877;
  for (int c = 0; c < 3; ++c) r.images.push_back({Mat<float>::Constant(3, 16 * 16, 0.2f * static_cast<float>(c)), 16});
  return r;
}

}  // namespace

TEST_CASE("label formatting and glyphs") {
  CHECK(explain::format_prob(0.123) == "0.12");
  CHECK(explain::format_prob(0.877) == "0.88");
  CHECK(explain::format_prob(1.0) == "1.00");
  for (char c : std::string("0123456789.-+")) CHECK(explain::glyph(c) != 0);
  CHECK(explain::glyph('1') != explain::glyph('7'));
}

TEST_CASE("grid and sidecar are deterministic and agree") {
  TempDir dir;
  const std::vector<explain::CounterfactualResult> rs{fake_result("a_00001", 2, 1), fake_result("b_00002", 2, -1)};
  explain::emit_grid(rs, 1, dir.path / "g1.png");
  explain::emit_grid(rs, 1, dir.path / "g2.png");
  CHECK(file_hash(dir.path / "g1.png") == file_hash(dir.path / "g2.png"));
  const auto rgb = read_png_rgb8(dir.path / "g1.png");
  CHECK(rgb.width > 3 * 16);
  CHECK(rgb.height > 2 * 16);

  const auto kv = pipeline::read_key_values(explain::sidecar_path(dir.path / "g1.png"));
  std::ifstream is(explain::sidecar_path(dir.path / "g1.png"));
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  CHECK(text.rfind("# diffex-grid v1\n", 0) == 0);
  CHECK(text.find("row 1: source=b_00002 direction=2 sign=-") != std::string::npos);
  CHECK(text.find("tile 0 2: alpha=3 prob=0.88") != std::string::npos);
  CHECK(text.find("tile 1 1: alpha=-1.5 prob=0.50") != std::string::npos);
  CHECK_THROWS_AS(explain::emit_grid({}, 1, dir.path / "g3.png"), InputError);
}

TEST_CASE("ranking report round trip") {
  ranking::RankingReport r;
  r.config.n_max = 2;
  r.config_hash = 77;
  ranking::Transition t;
  t.source_class = 0;
  t.target_class = 1;
  t.pool_ids = {"a", "b", "c"};
  t.selected.push_back({3, -1, 3.0, 0.41, 3, {"a", "c"}});
  r.transitions.push_back(t);
  t.source_class = 1;
  t.target_class = 0;
  t.selected.clear();
  r.transitions.push_back(t);
  const std::string text = ranking::format_report(r);
  const auto back = ranking::parse_report(text);
  REQUIRE(back.transitions.size() == 2);
  CHECK(back.config_hash == 77);
  CHECK(back.transitions[0].selected.at(0).explained_ids == std::vector<std::string>{"a", "c"});
  CHECK(back.transitions[0].selected.at(0).sign == -1);
  CHECK(back.transitions[1].selected.empty());
  CHECK(ranking::format_report(back) == text);
  CHECK_THROWS(ranking::parse_report("garbage"));
}

TEST_CASE("candidate indexing") {
  for (int c = 0; c < 20; ++c) CHECK(ranking::candidate_index(ranking::candidate_at(c)) == c);
  CHECK(ranking::candidate_at(0).sign == 1);
  CHECK(ranking::candidate_at(1).sign == -1);
  CHECK(ranking::candidate_at(5).k == 2);
  ranking::RankingConfig cfg;
  CHECK(cfg.validate(10).empty());
  cfg.n_max = 21;
  CHECK_FALSE(cfg.validate(10).empty());
}
