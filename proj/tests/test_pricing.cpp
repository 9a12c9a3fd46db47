#include <doctest.h>

#include "dispatch/pricing.hpp"
#include "support/testutil.hpp"

using namespace dispatch;
using namespace testutil;

namespace {

const NodalPrice& at(const std::vector<NodalPrice>& prices, int bus, int hour) {
  for (const auto& p : prices)
    if (p.bus == bus && p.hour == hour) return p;
  throw std::logic_error("price not found");
}

}  // namespace

TEST_CASE("decomposition reconstructs the lmp at every bus-hour") {
  for (const char* name : {"case2", "case3ramp", "case_islands", "case14"}) {
    CaseModel cs = load_fixture(name);
    DispatchSolution sol = solve_dispatch(cs, {});
    REQUIRE(sol.converged);
    for (const NodalPrice& p : compute_lmps(sol, cs))
      CHECK(std::abs(p.lmp - (p.energy + p.loss + p.congestion)) < 1e-9);
  }
}

TEST_CASE("lossless uncongested network prices at lambda0 everywhere") {
  CaseModel cs = load_fixture("case2");
  cs.branches[0].r = 0.0;
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);
  auto prices = compute_lmps(sol, cs);
  const double lam0 = sol.lambda0[0](0) / cs.base_mva;
  for (const auto& p : prices) {
    CHECK(p.lmp == doctest::Approx(lam0).epsilon(1e-8));
    CHECK(std::abs(p.loss) < 1e-8);
    CHECK(std::abs(p.congestion) < 1e-8);
  }
}

TEST_CASE("case2: loss markup at the load bus, golden values") {
  CaseModel cs = load_fixture("case2");
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);
  auto prices = compute_lmps(sol, cs);
  CHECK(at(prices, 0, 0).lmp == doctest::Approx(14.0).epsilon(1e-6));
  CHECK(at(prices, 1, 0).lmp == doctest::Approx(14.308635).epsilon(1e-4));
  CHECK(at(prices, 1, 0).lmp > at(prices, 0, 0).lmp);
  CHECK(at(prices, 1, 0).loss > 0.0);
}

TEST_CASE("case3ramp: congestion component matches the flow dual") {
  CaseModel cs = load_fixture("case3ramp");
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);
  auto prices = compute_lmps(sol, cs);
  CHECK(at(prices, 2, 1).lmp == doctest::Approx(22.0).epsilon(1e-4));
  CHECK(at(prices, 2, 1).congestion > 5.0);
  CHECK(std::abs(at(prices, 2, 0).congestion) < 1e-6);  // hour 1 unconstrained
}

TEST_CASE("no-arbitrage: same-bus bids face the same locational value") {
  CaseModel cs = load_fixture("case2");
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);
  auto units = marginal_profits(sol, cs);
  // g1 and g2 share b1: pi + price identical
  const double v1 = units[0].pi + cs.bids[0].price[0];
  const double v2 = units[1].pi + cs.bids[1].price[0];
  CHECK(std::abs(v1 - v2) < 1e-9);
}

TEST_CASE("marginal profit positions and signs") {
  CaseModel cs = load_fixture("case2");
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);
  auto units = marginal_profits(sol, cs);
  // g1 cheap at ub with positive profit
  CHECK(units[0].position == UnitPosition::at_ub);
  CHECK(units[0].pi == doctest::Approx(4.0).epsilon(1e-6));
  // g2 marginal
  CHECK(units[1].position == UnitPosition::interior);
  CHECK(std::abs(units[1].pi) < 1e-6);
  // g3 priced out at lb
  CHECK(units[2].position == UnitPosition::at_lb);
  CHECK(units[2].pi < -5.0);
}

TEST_CASE("ramp-bound unit carries a nonzero profit gap") {
  CaseModel cs = load_fixture("case3ramp");
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);
  auto units = marginal_profits(sol, cs);
  // g1 hour 0: held above its myopic optimum to enable hour 1 (pi < 0)
  const UnitEconomics& g1h0 = units[0];
  REQUIRE(g1h0.bid == 0);
  REQUIRE(g1h0.hour == 0);
  CHECK(g1h0.position == UnitPosition::ramp_bound);
  CHECK(g1h0.pi < -1.0);
  // g2 is energy-bound across the session
  for (const auto& u : units)
    if (u.bid == 1) CHECK(u.position == UnitPosition::energy_bound);
}

TEST_CASE("equilibrium check") {
  CaseModel cs = load_fixture("case2");
  DispatchSolution sol = solve_dispatch(cs, {});
  REQUIRE(sol.converged);

  SUBCASE("converged solution passes at the currency tolerance") {
    EquilibriumReport rep = equilibrium_check(sol, cs, 0.01);
    CHECK(rep.passed);
    CHECK(rep.max_violation <= 0.01);
  }
  SUBCASE("corrupting one unit localizes the violation") {
    DispatchSolution bad = sol;
    bad.x(0, 0) = 0.3;  // g1 pulled off its bound
    EquilibriumReport rep = equilibrium_check(bad, cs, 0.01);
    CHECK(!rep.passed);
    int worst_bid = -1;
    double worst = -1;
    for (const auto& e : rep.entries)
      if (std::abs(e.violation) > worst) {
        worst = std::abs(e.violation);
        worst_bid = e.bid;
      }
    CHECK(worst_bid == 0);
    CHECK(worst == doctest::Approx(4.0).epsilon(1e-4));  // now an interior unit with pi = 4
    // the others stay clean
    for (const auto& e : rep.entries)
      if (e.bid != 0) CHECK(std::abs(e.violation) < 1e-6);
  }
  SUBCASE("far-from-optimal volumes show large violations") {
    DispatchSolution bad = sol;
    bad.x.setZero();
    EquilibriumReport rep = equilibrium_check(bad, cs, 0.01);
    CHECK(rep.max_violation > 1.0);
  }
}

TEST_CASE("lmps require convergence") {
  CaseModel cs = load_fixture("case2");
  DispatchSolution sol = solve_dispatch(cs, {});
  sol.converged = false;
  CHECK_THROWS_AS(compute_lmps(sol, cs), NotConverged);
  CHECK_THROWS_AS(marginal_profits(sol, cs), NotConverged);
}
