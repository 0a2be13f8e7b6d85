#include "doctest.h"
#include "suites.hpp"

using namespace diffex;

#define CHECK_SUITE(expr)          \
  do {                             \
    const auto r = (expr);         \
    INFO(r.detail);                \
    CHECK(r.pass);                 \
  } while (0)

TEST_CASE("loss and shift formulas match loop oracles") { CHECK_SUITE(suites::analytic_oracles()); }
TEST_CASE("diffusion schedule and ddim mechanics") { CHECK_SUITE(suites::diffusion_mechanics()); }
TEST_CASE("analytic gradients match finite differences") { CHECK_SUITE(suites::gradient_suite()); }
TEST_CASE("greedy ranking on scripted deltas") { CHECK_SUITE(suites::ranking_suite()); }
TEST_CASE("kid estimator") { CHECK_SUITE(suites::kid_suite()); }
