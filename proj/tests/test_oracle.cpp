#include <doctest.h>

#include <sstream>

#include "dispatch/acpf.hpp"
#include "dispatch/oracle.hpp"
#include "support/testutil.hpp"

using namespace dispatch;
using namespace testutil;

// Golden values below were produced by oracle_solve itself and frozen after
// the first verified run; see fixtures/GOLDEN.md for the generation commands.

TEST_CASE("single bus, one bid: balancer solves it exactly") {
  std::istringstream in(R"(
meta { T = 1 }
buses [ { id = b1  kind = swing } ]
branches [ ]
bids [ { id = g1  bus = b1  price = 10  lb = 0  ub = 200 } ]
demand { b1 = 100 }
)");
  CaseModel cs = load_case(in);
  OracleResult r = oracle_solve(cs);
  CHECK(r.x(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(r.cost == doctest::Approx(1000.0).epsilon(1e-10));
}

TEST_CASE("case2 golden optimum") {
  CaseModel cs = load_fixture("case2");
  OracleResult r = oracle_solve(cs);
  CHECK(r.polished);
  CHECK(r.cost == doctest::Approx(1175.678007538).epsilon(1e-9));
  CHECK(r.x(0, 0) == doctest::Approx(0.6).epsilon(1e-8));
  CHECK(r.x(1, 0) == doctest::Approx(0.411198577).epsilon(1e-7));
  CHECK(r.x(2, 0) == doctest::Approx(0.0));
}

TEST_CASE("case3ramp golden optimum and active set") {
  CaseModel cs = load_fixture("case3ramp");
  OracleResult r = oracle_solve(cs);
  CHECK(r.cost == doctest::Approx(1912.604022753).epsilon(1e-8));
  CHECK(r.x(0, 0) == doctest::Approx(0.051491961).epsilon(1e-6));
  CHECK(r.x(1, 1) == doctest::Approx(0.448524102).epsilon(1e-6));
  CHECK(r.x(2, 1) == doctest::Approx(0.354304957).epsilon(1e-6));
  // binding structure: ramp on g1, hydro energy cap, hour-2 corridor
  auto has = [&](const std::string& needle) {
    for (const auto& a : r.active)
      if (a.find(needle) != std::string::npos) return true;
    return false;
  };
  CHECK(has("ramp up g1"));
  CHECK(has("energy max hydro"));
  CHECK(has("flow sec3 hour 1"));
}

TEST_CASE("oracle optimum satisfies the full balance including the swing row") {
  CaseModel cs = load_fixture("case2");
  OracleResult r = oracle_solve(cs);
  AdmittanceStructure adm = build_admittance(cs, 0);
  SystemState st = newton_power_flow(cs, 0, r.x.col(0), flat_state(cs, 0));
  BalanceResidual res = eval_balance(st, cs, adm, r.x.col(0));
  CHECK(res.inf_norm() <= 1e-6);  // balancer design: swing row closes too
}

TEST_CASE("infeasible demand raises NoFeasiblePoint") {
  CaseModel cs = load_fixture("case2");
  cs.buses[1].p_load[0] = 2.5;  // above total bid capacity
  CHECK_THROWS_AS(oracle_solve(cs), NoFeasiblePoint);
}

TEST_CASE("grid guard rejects oversized cases") {
  CaseModel cs = load_fixture("case14");
  CHECK_THROWS_AS(oracle_solve(cs), GridTooLarge);
}

TEST_CASE("oracle is deterministic") {
  CaseModel cs = load_fixture("case2");
  OracleResult a = oracle_solve(cs);
  OracleResult b = oracle_solve(cs);
  CHECK(a.cost == b.cost);
  CHECK((a.x - b.x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fd prices") {
  SUBCASE("single bus: marginal unit sets the price") {
    std::istringstream in(R"(
meta { T = 1 }
buses [ { id = b1  kind = swing } ]
branches [ ]
bids [
  { id = g1  bus = b1  price = 10  lb = 0  ub = 200 }
  { id = g2  bus = b1  price = 30  lb = 0  ub = 100 }
]
demand { b1 = 100 }
)");
    CaseModel cs = load_case(in);
    CHECK(oracle_lmp(cs, 0, 0) == doctest::Approx(10.0).epsilon(1e-5));
  }
  SUBCASE("case2: losses push the load-bus price above the marginal bid") {
    CaseModel cs = load_fixture("case2");
    const double p1 = oracle_lmp(cs, 0, 0);
    const double p2 = oracle_lmp(cs, 1, 0);
    CHECK(p1 == doctest::Approx(14.0).epsilon(2e-4));
    CHECK(p2 == doctest::Approx(14.308635).epsilon(2e-4));
    CHECK(p2 > p1);
  }
  SUBCASE("case3ramp: congestion separates prices at the constrained hour") {
    CaseModel cs = load_fixture("case3ramp");
    const double b1 = oracle_lmp(cs, 0, 1);
    const double b3 = oracle_lmp(cs, 2, 1);
    CHECK(b3 == doctest::Approx(22.0).epsilon(2e-4));
    CHECK(b3 - b1 > 5.0);
  }
}
