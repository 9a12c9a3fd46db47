#include <doctest.h>

#include <random>
#include <sstream>

#include "dispatch/qpsolve.hpp"
#include "dispatch/reduction.hpp"
#include "support/testutil.hpp"

using namespace dispatch;
using namespace testutil;

namespace {

struct HourSetup {
  CaseModel cs;
  AdmittanceStructure adm;
  SystemState st;
  StateIndex idx;
  IncidenceMap inc;
  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  LuHandle lu;
};

HourSetup solved_case2(double x1 = 0.6, double x2 = 0.45) {
  HourSetup h{load_fixture("case2"), {}, {}, {}, {}, {}, {}, {}};
  h.adm = build_admittance(h.cs, 0);
  Eigen::VectorXd x(3);
  x << x1, x2, 0.0;
  h.st = newton_power_flow(h.cs, 0, x, flat_state(h.cs, 0));
  h.idx = StateIndex::build(h.cs, h.st);
  h.inc = bid_incidence(h.cs);
  eval_jacobian(h.st, h.cs, h.adm, h.idx, h.DF, h.DF0);
  h.lu = LuHandle::factorize(h.DF);
  return h;
}

}  // namespace

TEST_CASE("factorize solves and reuses the symbolic pattern") {
  HourSetup h = solved_case2();
  Eigen::VectorXd v = Eigen::VectorXd::Random(h.idx.n_free);
  Eigen::VectorXd b = h.DF * v;
  CHECK((h.lu.solve(b) - v).cwiseAbs().maxCoeff() < 1e-10);
  Eigen::VectorXd bt = h.DF.transpose() * v;
  CHECK((h.lu.solve_transpose(bt) - v).cwiseAbs().maxCoeff() < 1e-10);

  // same pattern: the handle is reusable as a symbolic token
  LuHandle again = LuHandle::factorize(h.DF, &h.lu);
  CHECK(again.pattern_signature() == h.lu.pattern_signature());
  CHECK((again.solve(b) - v).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("singular matrix raises NumericallySingular") {
  // duplicated row: exactly rank-deficient
  Eigen::SparseMatrix<double> A(3, 3);
  std::vector<Eigen::Triplet<double>> ts{{0, 0, 1.0}, {0, 1, 2.0}, {1, 0, 1.0},
                                         {1, 1, 2.0}, {2, 2, 4.0}};
  A.setFromTriplets(ts.begin(), ts.end());
  CHECK_THROWS_AS(LuHandle::factorize(A), NumericallySingular);
}

TEST_CASE("near-boundary jacobian is flagged numerically singular") {
  CaseModel cs = load_fixture("case2");
  // continuation toward collapse: scale load until factorization degrades
  bool flagged = false;
  for (double scale = 1.0; scale < 600.0; scale *= 1.6) {
    CaseModel heavy = cs;
    heavy.buses[1].p_load[0] *= scale;
    heavy.buses[1].q_load[0] *= scale;
    try {
      SystemState st =
          newton_power_flow(heavy, 0, Eigen::VectorXd::Zero(3), flat_state(heavy, 0),
                            {.tol = 1e-8, .max_iter = 80, .pv_pq_switching = false});
      StateIndex idx = StateIndex::build(heavy, st);
      Eigen::SparseMatrix<double> DF;
      Eigen::MatrixXd DF0;
      eval_jacobian(st, heavy, build_admittance(heavy, 0), idx, DF, DF0);
      LuHandle lu = LuHandle::factorize(DF);
      CHECK(lu.smallest_singular_estimate() > 0.0);
    } catch (const NumericallySingular&) {
      flagged = true;
      break;
    } catch (const DispatchError&) {
      flagged = true;  // Newton itself failing near the nose is acceptable
      break;
    }
  }
  CHECK(flagged);
}

TEST_CASE("reduced gradients: lossless L0 is all ones") {
  CaseModel cs = load_fixture("case2");
  cs.branches[0].r = 0.0;
  cs.buses[1].q_load[0] = 0.0;
  AdmittanceStructure adm = build_admittance(cs, 0);
  Eigen::VectorXd x(3);
  x << 0.5, 0.3, 0.2;
  SystemState st = newton_power_flow(cs, 0, x, flat_state(cs, 0));
  StateIndex idx = StateIndex::build(cs, st);
  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  eval_jacobian(st, cs, adm, idx, DF, DF0);
  LuHandle lu = LuHandle::factorize(DF);
  Eigen::MatrixXd L0, S;
  reduced_gradients(lu, cs, bid_incidence(cs), idx, DF0, Eigen::MatrixXd(0, idx.n_free), L0, S);
  for (int j = 0; j < 3; j++) CHECK(L0(0, j) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("reduced gradients match finite-difference sensitivities") {
  HourSetup h = solved_case2();
  std::vector<int> none;
  Eigen::MatrixXd L0, S;
  // case2 has no flow constraint; add a synthetic one on the line
  h.cs.flow_constraints.push_back({"fline", {{"l1", 0, 1.0}}, {10.0}});
  h.cs.relink();
  FlowEval fe = eval_flow_constraints(h.st, h.cs, h.adm, h.idx, {0});
  reduced_gradients(h.lu, h.cs, h.inc, h.idx, h.DF0, fe.grad, L0, S);

  // L0 - 1 equals the loss sensitivity to incremental withdrawal at the bus:
  // FD of total loss with demand bumped at the bid bus, swing compensating.
  const double d = 1e-5;
  NewtonOptions nopt{.tol = 1e-12, .max_iter = 60, .pv_pq_switching = false};
  Eigen::VectorXd x(3);
  x << 0.6, 0.45, 0.0;
  for (int j = 0; j < 3; j++) {
    const int bus = h.cs.bids[static_cast<size_t>(j)].bus;
    CaseModel pert = h.cs;
    pert.buses[static_cast<size_t>(bus)].p_load[0] += d;
    const double lp = total_loss(newton_power_flow(pert, 0, x, h.st, nopt), pert, h.adm);
    pert.buses[static_cast<size_t>(bus)].p_load[0] -= 2 * d;
    const double lm = total_loss(newton_power_flow(pert, 0, x, h.st, nopt), pert, h.adm);
    CHECK(rel_err(L0(0, j) - 1.0, (lp - lm) / (2 * d)) < 1e-5);
  }

  // S rows are injection sensitivities: FD with demand carries the
  // opposite sign.
  for (int j = 0; j < 3; j++) {
    const int bus = h.cs.bids[static_cast<size_t>(j)].bus;
    CaseModel pert = h.cs;
    pert.buses[static_cast<size_t>(bus)].p_load[0] += d;
    SystemState sp = newton_power_flow(pert, 0, x, h.st, nopt);
    const double fp = eval_flow_constraints(sp, pert, h.adm, h.idx, {0}, false).value(0);
    pert.buses[static_cast<size_t>(bus)].p_load[0] -= 2 * d;
    SystemState sm = newton_power_flow(pert, 0, x, h.st, nopt);
    const double fm = eval_flow_constraints(sm, pert, h.adm, h.idx, {0}, false).value(0);
    CHECK(rel_err(S(0, j), -(fp - fm) / (2 * d)) < 1e-5);
  }
  (void)none;
}

TEST_CASE("adjoint identity") {
  HourSetup h = solved_case2();
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> un(-1, 1);
  for (int trial = 0; trial < 5; trial++) {
    Eigen::VectorXd u(h.idx.n_free), v(h.idx.n_free);
    for (int i = 0; i < h.idx.n_free; i++) {
      u(i) = un(rng);
      v(i) = un(rng);
    }
    const double fwd = u.dot(h.lu.solve(v));
    const double adj = v.dot(h.lu.solve_transpose(u));
    CHECK(std::abs(fwd - adj) < 1e-10 * std::max(1.0, std::abs(fwd)));
  }
}

TEST_CASE("reduced hessian with group dedup") {
  HourSetup h = solved_case2();
  HessianWeights w;
  w.lambda_rows = Eigen::VectorXd::Ones(h.idx.n_free);
  w.lambda0 = Eigen::VectorXd::Ones(1);
  w.sigma = Eigen::VectorXd(0);
  w.flow_subset = {};
  Eigen::SparseMatrix<double> H = constraint_hessian(h.st, h.cs, h.adm, h.idx, w);

  SUBCASE("zero multipliers give a zero reduced hessian") {
    HessianWeights z = w;
    z.lambda_rows.setZero();
    z.lambda0.setZero();
    Eigen::SparseMatrix<double> Hz = constraint_hessian(h.st, h.cs, h.adm, h.idx, z);
    Eigen::MatrixXd Hr = reduced_hessian(h.lu, h.cs, h.inc, h.idx, Hz);
    CHECK(Hr.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }

  SUBCASE("3 bids on 2 generator buses: exactly 2 forward solves") {
    // separate swing so every group needs a genuine column
    std::istringstream in(R"(
meta { T = 1 }
buses [ { id = s  kind = swing } { id = n1 } { id = n2 } ]
branches [
  { id = e1  from = s  to = n1  r = 0.01  x = 0.1 }
  { id = e2  from = s  to = n2  r = 0.02  x = 0.15 }
  { id = e3  from = n1  to = n2  r = 0.01  x = 0.12 }
]
bids [
  { id = p1  bus = n1  price = 5  ub = 50 }
  { id = p2  bus = n1  price = 6  ub = 50 }
  { id = p3  bus = n2  price = 7  ub = 50 }
]
demand { n2 = 40 }
)");
    CaseModel cs3 = load_case(in);
    AdmittanceStructure adm3 = build_admittance(cs3, 0);
    Eigen::VectorXd x3 = Eigen::VectorXd::Constant(3, 0.15);
    SystemState st3 = newton_power_flow(cs3, 0, x3, flat_state(cs3, 0));
    StateIndex idx3 = StateIndex::build(cs3, st3);
    Eigen::SparseMatrix<double> DF3;
    Eigen::MatrixXd DF03;
    eval_jacobian(st3, cs3, adm3, idx3, DF3, DF03);
    LuHandle lu3 = LuHandle::factorize(DF3);
    HessianWeights w3;
    w3.lambda_rows = Eigen::VectorXd::Ones(idx3.n_free);
    w3.lambda0 = Eigen::VectorXd::Ones(1);
    w3.sigma = Eigen::VectorXd(0);
    w3.flow_subset = {};
    Eigen::SparseMatrix<double> H3 = constraint_hessian(st3, cs3, adm3, idx3, w3);
    const long before = lu3.solve_count();
    Eigen::MatrixXd Hr = reduced_hessian(lu3, cs3, bid_incidence(cs3), idx3, H3);
    CHECK(lu3.solve_count() - before == 2);
    CHECK(Hr.rows() == 3);
    CHECK(Hr(0, 0) == doctest::Approx(Hr(1, 1)));  // shared-bus bids see identical curvature
  }

  SUBCASE("dedup equals the column-per-bid computation") {
    Eigen::MatrixXd Hr = reduced_hessian(h.lu, h.cs, h.inc, h.idx, H);
    // brute force: one solve per bid; swing-bus bids have zero columns
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(h.idx.n_free, 3);
    for (int j = 0; j < 3; j++) {
      const int prow = h.idx.p_row_of_bus[static_cast<size_t>(h.cs.bids[static_cast<size_t>(j)].bus)];
      if (prow < 0) continue;
      Eigen::VectorXd e = Eigen::VectorXd::Zero(h.idx.n_free);
      e(prow) = 1.0;
      M.col(j) = h.lu.solve(e);
    }
    Eigen::MatrixXd brute = M.transpose() * H * M;
    CHECK((Hr - brute).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, brute.cwiseAbs().maxCoeff()));
  }

  SUBCASE("symmetric within 1e-10 and PD at flat start with uniform lambda") {
    SystemState fs = flat_state(h.cs, 0);
    StateIndex fidx = StateIndex::build(h.cs, fs);
    Eigen::SparseMatrix<double> DF;
    Eigen::MatrixXd DF0;
    eval_jacobian(fs, h.cs, h.adm, fidx, DF, DF0);
    LuHandle lu = LuHandle::factorize(DF);
    HessianWeights wf;
    wf.lambda_rows = Eigen::VectorXd::Zero(fidx.n_free);
    for (int i = 0; i < h.cs.n_buses(); i++)
      if (fidx.p_row_of_bus[static_cast<size_t>(i)] >= 0)
        wf.lambda_rows(fidx.p_row_of_bus[static_cast<size_t>(i)]) = 1.0;
    wf.lambda0 = Eigen::VectorXd::Ones(1);
    wf.sigma = Eigen::VectorXd(0);
    wf.flow_subset = {};
    Eigen::SparseMatrix<double> Hf = constraint_hessian(fs, h.cs, h.adm, fidx, wf);
    Eigen::MatrixXd Hr = reduced_hessian(lu, h.cs, h.inc, fidx, Hf);
    CHECK((Hr - Hr.transpose()).cwiseAbs().maxCoeff() < 1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hr);
    // swing-bus bids have structurally zero columns, so H_red is only PSD;
    // the non-swing block (bid g3) must carry strict curvature.
    CHECK(es.eigenvalues().minCoeff() >= -1e-12);
    CHECK(Hr(2, 2) > 0.0);
  }
}

TEST_CASE("psd projection") {
  SUBCASE("identity unchanged") {
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3, 3);
    CHECK((psd_project(I) - I).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("diag(1,-1) clips to diag(1,eps)") {
    Eigen::MatrixXd D = Eigen::Vector2d(1.0, -1.0).asDiagonal();
    Eigen::MatrixXd P = psd_project(D);
    CHECK(P(0, 0) == doctest::Approx(1.0));
    CHECK(P(1, 1) == doctest::Approx(1e-8));
    CHECK(std::abs(P(0, 1)) < 1e-15);
  }
  SUBCASE("output is PSD and projection is idempotent") {
    std::mt19937 rng(29);
    std::uniform_real_distribution<double> un(-2, 2);
    for (int trial = 0; trial < 10; trial++) {
      Eigen::MatrixXd A(4, 4);
      for (int i = 0; i < 16; i++) A(i / 4, i % 4) = un(rng);
      Eigen::MatrixXd Hs = 0.5 * (A + A.transpose());
      Eigen::MatrixXd P = psd_project(Hs);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P);
      CHECK(es.eigenvalues().minCoeff() >= -1e-12);
      CHECK((psd_project(P) - P).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("reduced cost") {
  HourSetup h = solved_case2();
  Eigen::VectorXd c(3);
  c << 10, 14, 20;
  HessianWeights w;
  w.lambda_rows = Eigen::VectorXd::Ones(h.idx.n_free);
  w.lambda0 = Eigen::VectorXd::Ones(1);
  w.sigma = Eigen::VectorXd(0);
  w.flow_subset = {};
  Eigen::SparseMatrix<double> H = constraint_hessian(h.st, h.cs, h.adm, h.idx, w);

  SUBCASE("feasible point leaves c unchanged") {
    Eigen::VectorXd rF = Eigen::VectorXd::Zero(h.idx.n_free);
    Eigen::VectorXd ct = reduced_cost(c, rF, h.lu, h.cs, h.inc, h.idx, H);
    CHECK((ct - c).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("zero hessian leaves c unchanged") {
    Eigen::SparseMatrix<double> Hz(h.idx.n_free, h.idx.n_free);
    Eigen::VectorXd rF = Eigen::VectorXd::Random(h.idx.n_free);
    Eigen::VectorXd ct = reduced_cost(c, rF, h.lu, h.cs, h.inc, h.idx, Hz);
    CHECK((ct - c).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("matches the gradient of the substituted quadratic at dx = 0") {
    // objective in dx after eliminating dy: c'dx + 1/2 (y0 + M dx)' H (y0 + M dx)
    Eigen::VectorXd rF = 0.01 * Eigen::VectorXd::Random(h.idx.n_free);
    Eigen::VectorXd ct = reduced_cost(c, rF, h.lu, h.cs, h.inc, h.idx, H);
    Eigen::VectorXd y0 = h.lu.solve(rF);
    const double d = 1e-6;
    for (int j = 0; j < 3; j++) {
      const int prow = h.idx.p_row_of_bus[static_cast<size_t>(h.cs.bids[static_cast<size_t>(j)].bus)];
      if (prow < 0) {
        CHECK(ct(j) == c(j));  // swing-bus bid: no elimination correction
        continue;
      }
      auto phi = [&](double s) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(h.idx.n_free);
        e(prow) = s;
        Eigen::VectorXd dy = y0 + h.lu.solve(e);
        return c(j) * s + 0.5 * dy.dot(H * dy);
      };
      const double fd = (phi(d) - phi(-d)) / (2 * d);
      CHECK(rel_err(ct(j), fd) < 1e-6);
    }
  }
}
