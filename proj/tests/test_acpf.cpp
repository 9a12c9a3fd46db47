#include <doctest.h>

#include <random>

#include "dispatch/acpf.hpp"
#include "dispatch/reduction.hpp"
#include "dispatch/sqp.hpp"
#include "support/testutil.hpp"

using namespace dispatch;
using namespace testutil;

TEST_CASE("flat-start residual equals the net load") {
  CaseModel cs = load_fixture("case2");
  cs.buses[1].q_load[0] = 0.0;  // isolate the active row
  AdmittanceStructure adm = build_admittance(cs, 0);
  SystemState st = flat_state(cs, 0);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(cs.n_bids());
  BalanceResidual res = eval_balance(st, cs, adm, x);
  StateIndex idx = StateIndex::build(cs, st);
  // zero flows at flat start: active residual at b2 = +load (injection convention)
  CHECK(res.rows(idx.p_row_of_bus[1]) == doctest::Approx(1.0));
  CHECK(res.swing(0) == doctest::Approx(0.0));
}

TEST_CASE("dimension mismatches are rejected") {
  CaseModel cs = load_fixture("case2");
  AdmittanceStructure adm = build_admittance(cs, 0);
  SystemState st = flat_state(cs, 0);
  CHECK_THROWS_AS(eval_balance(st, cs, adm, Eigen::VectorXd::Zero(2)), DimensionMismatch);
  SystemState wrong = st;
  wrong.kind.pop_back();
  CHECK_THROWS_AS(eval_balance(wrong, cs, adm, Eigen::VectorXd::Zero(3)), DimensionMismatch);
}

TEST_CASE("jacobian matches central finite differences") {
  std::mt19937 rng(7);
  for (const char* name : {"case2", "case3ramp"}) {
    CaseModel cs = load_fixture(name);
    for (int hour = 0; hour < cs.T; hour++) {
      AdmittanceStructure adm = build_admittance(cs, hour);
      SystemState st = random_interior_state(cs, hour, rng);
      StateIndex idx = StateIndex::build(cs, st);
      Eigen::VectorXd x = Eigen::VectorXd::Constant(cs.n_bids(), 0.3);
      Eigen::SparseMatrix<double> DF;
      Eigen::MatrixXd DF0, fdDF, fdDF0;
      eval_jacobian(st, cs, adm, idx, DF, DF0);
      fd_jacobian(st, cs, adm, x, fdDF, fdDF0);
      CHECK(max_rel_err(Eigen::MatrixXd(DF), fdDF) < 1e-6);
      CHECK(max_rel_err(DF0, fdDF0) < 1e-6);
    }
  }
}

TEST_CASE("jacobian pattern is typing-invariant") {
  CaseModel cs = load_fixture("case3ramp");
  AdmittanceStructure adm = build_admittance(cs, 0);
  std::mt19937 rng(3);
  SystemState a = random_interior_state(cs, 0, rng);
  SystemState b = random_interior_state(cs, 0, rng);
  StateIndex ia = StateIndex::build(cs, a), ib = StateIndex::build(cs, b);
  CHECK(ia.typing_signature == ib.typing_signature);
  Eigen::SparseMatrix<double> DFa, DFb;
  Eigen::MatrixXd DF0;
  eval_jacobian(a, cs, adm, ia, DFa, DF0);
  eval_jacobian(b, cs, adm, ib, DFb, DF0);
  REQUIRE(DFa.nonZeros() == DFb.nonZeros());
  for (int k = 0; k < DFa.outerSize(); k++) {
    Eigen::SparseMatrix<double>::InnerIterator ita(DFa, k), itb(DFb, k);
    for (; ita; ++ita, ++itb) {
      CHECK(ita.row() == itb.row());
      CHECK(ita.col() == itb.col());
    }
  }
}

TEST_CASE("hand-computed two-bus jacobian at flat start") {
  CaseModel cs = load_fixture("case2");
  cs.buses[1].q_load[0] = 0.0;
  AdmittanceStructure adm = build_admittance(cs, 0);
  SystemState st = flat_state(cs, 0);
  StateIndex idx = StateIndex::build(cs, st);
  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  eval_jacobian(st, cs, adm, idx, DF, DF0);
  // y = 1/(0.01 + j0.1): g = 0.9901, b = -9.901
  const double g = 0.01 / (0.01 * 0.01 + 0.1 * 0.1);
  const double b = -0.1 / (0.01 * 0.01 + 0.1 * 0.1);
  // dP2/dth2 = -V2 V1 b, dP2/dV2 = 2 V2 g - V1 g, dQ2/dth2 = -g, dQ2/dV2 = -2b + b
  Eigen::MatrixXd D(DF);
  const int a2 = idx.ang_of_bus[1], v2 = idx.vm_of_bus[1];
  const int p2 = idx.p_row_of_bus[1], q2 = idx.q_row_of_bus[1];
  CHECK(D(p2, a2) == doctest::Approx(-b));
  CHECK(D(p2, v2) == doctest::Approx(g));
  CHECK(D(q2, a2) == doctest::Approx(-g));
  CHECK(D(q2, v2) == doctest::Approx(-b));
  // swing row: off-diagonal Ybus entry is the negated series admittance,
  // so dP1/dth2 = b and dP1/dV2 = -g at flat start
  CHECK(DF0(0, a2) == doctest::Approx(b));
  CHECK(DF0(0, v2) == doctest::Approx(-g));
}

TEST_CASE("newton power flow basics") {
  CaseModel cs = load_fixture("case2");
  SUBCASE("zero load, zero injection: flat start is the solution") {
    for (auto& bus : cs.buses) {
      bus.p_load[0] = 0;
      bus.q_load[0] = 0;
    }
    SystemState st = newton_power_flow(cs, 0, Eigen::VectorXd::Zero(3), flat_state(cs, 0));
    CHECK(st.theta.cwiseAbs().maxCoeff() < 1e-12);
    CHECK((st.vm.array() - 1.0).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("loaded case converges with depressed voltage") {
    Eigen::VectorXd x(3);
    x << 0.6, 0.45, 0.0;  // close to load + losses at b1
    SystemState st = newton_power_flow(cs, 0, x, flat_state(cs, 0));
    AdmittanceStructure adm = build_admittance(cs, 0);
    BalanceResidual res = eval_balance(st, cs, adm, x);
    CHECK(res.rows.cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(st.vm(1) < 1.0);
  }
  SUBCASE("absurd load is outside the solvability region") {
    cs.buses[1].p_load[0] = 100.0;  // 10000 MW over one line
    CHECK_THROWS(newton_power_flow(cs, 0, Eigen::VectorXd::Zero(3), flat_state(cs, 0)));
  }
}

TEST_CASE("pv-pq switching") {
  CaseModel cs = load_fixture("case3ramp");
  AdmittanceStructure adm = build_admittance(cs, 1);

  SUBCASE("within limits: no changes") {
    cs.buses[2].p_load[1] = 0.2;
    cs.buses[2].q_load[1] = 0.0;
    SystemState st = flat_state(cs, 1);
    Eigen::VectorXd x(3);
    x << 0.2, 0.0, 0.0;
    st = newton_power_flow(cs, 1, x, st, {.tol = 1e-8, .max_iter = 50, .pv_pq_switching = false});
    CHECK(pv_pq_switch(st, cs, adm) == 0);
  }
  SUBCASE("reactive ceiling forces PQ typing at the limit") {
    SystemState st = flat_state(cs, 1);
    Eigen::VectorXd x(3);
    x << 0.5, 0.6, 0.0;  // heavy hour: b2 must produce lots of reactive
    st = newton_power_flow(cs, 1, x, st, {.tol = 1e-8, .max_iter = 50, .pv_pq_switching = false});
    int changes = pv_pq_switch(st, cs, adm);
    CHECK(changes == 1);
    CHECK(st.kind[1] == BusKind::PQ);
    CHECK(st.pinned[1] == 1);
    CHECK(st.q_pin(1) == doctest::Approx(cs.buses[1].q_max));
    // idempotence at fixed state
    CHECK(pv_pq_switch(st, cs, adm) == 0);
  }
}

TEST_CASE("flow constraint values and gradients") {
  CaseModel cs = load_fixture("case3ramp");
  AdmittanceStructure adm = build_admittance(cs, 0);
  std::vector<int> all{0};

  SUBCASE("zero at flat start") {
    SystemState st = flat_state(cs, 0);
    StateIndex idx = StateIndex::build(cs, st);
    FlowEval ev = eval_flow_constraints(st, cs, adm, idx, all);
    CHECK(std::abs(ev.value(0)) < 1e-14);
  }
  SUBCASE("sign reversal negates the value") {
    std::mt19937 rng(11);
    SystemState st = random_interior_state(cs, 0, rng);
    StateIndex idx = StateIndex::build(cs, st);
    FlowEval ev = eval_flow_constraints(st, cs, adm, idx, all);
    for (auto& t : cs.flow_constraints[0].terms) t.sign = -t.sign;
    FlowEval neg = eval_flow_constraints(st, cs, adm, idx, all);
    CHECK(ev.value(0) == doctest::Approx(-neg.value(0)));
  }
  SUBCASE("gradient matches finite differences") {
    std::mt19937 rng(13);
    SystemState st = random_interior_state(cs, 0, rng);
    StateIndex idx = StateIndex::build(cs, st);
    FlowEval ev = eval_flow_constraints(st, cs, adm, idx, all);
    const double h = 1e-6;
    SystemState work = st;
    Eigen::VectorXd base = get_free(st, cs, idx);
    for (int j = 0; j < idx.n_free; j++) {
      Eigen::VectorXd vp = base, vm = base;
      vp(j) += h;
      vm(j) -= h;
      set_free(work, cs, idx, vp);
      double fp = eval_flow_constraints(work, cs, adm, idx, all, false).value(0);
      set_free(work, cs, idx, vm);
      double fm = eval_flow_constraints(work, cs, adm, idx, all, false).value(0);
      CHECK(rel_err(ev.grad(0, j), (fp - fm) / (2 * h)) < 1e-6);
    }
  }
}

TEST_CASE("losses and loss gradients") {
  CaseModel cs = load_fixture("case2");

  SUBCASE("flat start gradients are zero") {
    AdmittanceStructure adm = build_admittance(cs, 0);
    SystemState st = flat_state(cs, 0);
    StateIndex idx = StateIndex::build(cs, st);
    Eigen::SparseMatrix<double> DF;
    Eigen::MatrixXd DF0;
    eval_jacobian(st, cs, adm, idx, DF, DF0);
    LuHandle lu = LuHandle::factorize(DF);
    LossGradients lg = loss_and_gradients(st, cs, adm, idx, lu);
    CHECK(lg.loss == doctest::Approx(0.0));
    CHECK(lg.dl_dxa.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(lg.dl_dxr.cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("r = 0 network has zero loss at any state") {
    cs.branches[0].r = 0.0;
    AdmittanceStructure adm = build_admittance(cs, 0);
    std::mt19937 rng(17);
    SystemState st = random_interior_state(cs, 0, rng);
    CHECK(std::abs(total_loss(st, cs, adm)) < 1e-12);
  }
  SUBCASE("adjoint gradient matches finite-difference re-solve") {
    AdmittanceStructure adm = build_admittance(cs, 0);
    Eigen::VectorXd x(3);
    x << 0.6, 0.45, 0.0;
    SystemState st = newton_power_flow(cs, 0, x, flat_state(cs, 0));
    StateIndex idx = StateIndex::build(cs, st);
    Eigen::SparseMatrix<double> DF;
    Eigen::MatrixXd DF0;
    eval_jacobian(st, cs, adm, idx, DF, DF0);
    LuHandle lu = LuHandle::factorize(DF);
    LossGradients lg = loss_and_gradients(st, cs, adm, idx, lu);

    const double h = 1e-5;
    NewtonOptions nopt{.tol = 1e-12, .max_iter = 60, .pv_pq_switching = false};
    // perturb the active injection at b2 (extra negative load)
    CaseModel pert = cs;
    pert.buses[1].p_load[0] -= h;
    double lp = total_loss(newton_power_flow(pert, 0, x, st, nopt), pert, adm);
    pert.buses[1].p_load[0] = cs.buses[1].p_load[0] + h;
    double lm = total_loss(newton_power_flow(pert, 0, x, st, nopt), pert, adm);
    CHECK(rel_err(lg.dl_dxa(1), (lp - lm) / (2 * h)) < 1e-5);

    // reactive injection at b2
    pert = cs;
    pert.buses[1].q_load[0] -= h;
    lp = total_loss(newton_power_flow(pert, 0, x, st, nopt), pert, adm);
    pert.buses[1].q_load[0] = cs.buses[1].q_load[0] + h;
    lm = total_loss(newton_power_flow(pert, 0, x, st, nopt), pert, adm);
    CHECK(rel_err(lg.dl_dxr(1), (lp - lm) / (2 * h)) < 1e-5);
  }
  SUBCASE("conservation: generation - load = loss at a solved flow") {
    AdmittanceStructure adm = build_admittance(cs, 0);
    Eigen::VectorXd x(3);
    x << 0.55, 0.5, 0.0;
    SystemState st = newton_power_flow(cs, 0, x, flat_state(cs, 0));
    // the swing row residual absorbs the imbalance; account for it
    BalanceResidual res = eval_balance(st, cs, adm, x);
    const double load = 1.0;
    CHECK(total_loss(st, cs, adm) ==
          doctest::Approx(x.sum() - load + res.swing(0)).epsilon(1e-8));
  }
}

TEST_CASE("constraint hessian action") {
  CaseModel cs = load_fixture("case3ramp");
  AdmittanceStructure adm = build_admittance(cs, 1);
  std::mt19937 rng(23);
  SystemState st = random_interior_state(cs, 1, rng);
  StateIndex idx = StateIndex::build(cs, st);

  HessianWeights w;
  w.lambda_rows = Eigen::VectorXd::Zero(idx.n_free);
  w.lambda0 = Eigen::VectorXd::Zero(cs.n_islands());
  w.sigma = Eigen::VectorXd::Zero(1);
  w.flow_subset = {0};

  SUBCASE("zero multipliers give zero action") {
    Eigen::SparseMatrix<double> H = constraint_hessian(st, cs, adm, idx, w);
    Eigen::VectorXd v = Eigen::VectorXd::Random(idx.n_free);
    CHECK((H * v).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }

  std::uniform_real_distribution<double> un(0.5, 2.0);
  for (int i = 0; i < idx.n_free; i++) w.lambda_rows(i) = un(rng);
  w.lambda0(0) = un(rng);
  w.sigma(0) = un(rng);

  SUBCASE("matches finite differences of the weighted gradient") {
    Eigen::SparseMatrix<double> H = constraint_hessian(st, cs, adm, idx, w);
    // gradient of lambda'F + lambda0'F0 + sigma'G via assembled jacobians
    auto weighted_grad = [&](const SystemState& s) {
      StateIndex ix = StateIndex::build(cs, s);
      Eigen::SparseMatrix<double> DF;
      Eigen::MatrixXd DF0;
      eval_jacobian(s, cs, adm, ix, DF, DF0);
      FlowEval fe = eval_flow_constraints(s, cs, adm, ix, w.flow_subset);
      Eigen::VectorXd g = DF.transpose() * w.lambda_rows + DF0.transpose() * w.lambda0 +
                          fe.grad.transpose() * w.sigma;
      return g;
    };
    const double h = 1e-6;
    SystemState work = st;
    Eigen::VectorXd base = get_free(st, cs, idx);
    Eigen::MatrixXd fdH(idx.n_free, idx.n_free);
    for (int j = 0; j < idx.n_free; j++) {
      Eigen::VectorXd vp = base, vm = base;
      vp(j) += h;
      vm(j) -= h;
      set_free(work, cs, idx, vp);
      Eigen::VectorXd gp = weighted_grad(work);
      set_free(work, cs, idx, vm);
      Eigen::VectorXd gm = weighted_grad(work);
      fdH.col(j) = (gp - gm) / (2 * h);
    }
    CHECK(max_rel_err(Eigen::MatrixXd(H), fdH) < 1e-5);
  }

  SUBCASE("symmetry of the action") {
    Eigen::SparseMatrix<double> H = constraint_hessian(st, cs, adm, idx, w);
    Eigen::VectorXd u = Eigen::VectorXd::Random(idx.n_free);
    Eigen::VectorXd v = Eigen::VectorXd::Random(idx.n_free);
    CHECK(std::abs(u.dot(H * v) - v.dot(H * u)) < 1e-10);
  }

  SUBCASE("flat start with uniform lambda is positive definite") {
    SystemState fs = flat_state(cs, 1);
    StateIndex fidx = StateIndex::build(cs, fs);
    HessianWeights wf;
    wf.lambda_rows = Eigen::VectorXd::Ones(fidx.n_free);
    // reactive rows carry zero multiplier at flat start
    for (int i = 0; i < cs.n_buses(); i++)
      if (fidx.q_row_of_bus[static_cast<size_t>(i)] >= 0)
        wf.lambda_rows(fidx.q_row_of_bus[static_cast<size_t>(i)]) = 0.0;
    wf.lambda0 = Eigen::VectorXd::Ones(cs.n_islands());
    wf.sigma = Eigen::VectorXd(0);
    wf.flow_subset = {};
    Eigen::SparseMatrix<double> H = constraint_hessian(fs, cs, adm, fidx, wf);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(H)};
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("taps, shifts and shunts: derivatives stay consistent") {
  std::istringstream in(R"(
meta { T = 1 }
buses [
  { id = b1  kind = swing  v_set = 1.02 }
  { id = b2  kind = PV  v_set = 1.0  q_min = -60  q_max = 60 }
  { id = b3  g_sh = 0.01  b_sh = 0.15 }
]
branches [
  { id = t1  from = b1  to = b2  r = 0.008  x = 0.09  b_ch = 0.04  tap = 1.05  shift = 0.03 }
  { id = t2  from = b2  to = b3  r = 0.012  x = 0.11  b_ch = 0.02  tap = 0.97 }
  { id = t3  from = b1  to = b3  r = 0.02   x = 0.16 }
]
bids [
  { id = g1  bus = b1  price = 10  ub = 100 }
  { id = g2  bus = b2  price = 13  ub = 80 }
]
flow_constraints [ { id = fc  terms = [+t1, -t2]  limit = 70 } ]
demand { b3 { p = 90  q = 25 } }
)");
  CaseModel cs = load_case(in);
  AdmittanceStructure adm = build_admittance(cs, 0);
  std::mt19937 rng(97);
  SystemState st = random_interior_state(cs, 0, rng);
  StateIndex idx = StateIndex::build(cs, st);
  Eigen::VectorXd x(2);
  x << 0.5, 0.4;

  // Jacobian and swing rows
  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0, fdDF, fdDF0;
  eval_jacobian(st, cs, adm, idx, DF, DF0);
  fd_jacobian(st, cs, adm, x, fdDF, fdDF0);
  CHECK(max_rel_err(Eigen::MatrixXd(DF), fdDF) < 1e-6);
  CHECK(max_rel_err(DF0, fdDF0) < 1e-6);

  // flow gradient across the phase-shifted branch
  FlowEval fe = eval_flow_constraints(st, cs, adm, idx, {0});
  const double h = 1e-6;
  SystemState work = st;
  Eigen::VectorXd base = get_free(st, cs, idx);
  for (int j = 0; j < idx.n_free; j++) {
    Eigen::VectorXd vp = base, vm = base;
    vp(j) += h;
    vm(j) -= h;
    set_free(work, cs, idx, vp);
    const double fp = eval_flow_constraints(work, cs, adm, idx, {0}, false).value(0);
    set_free(work, cs, idx, vm);
    const double fm = eval_flow_constraints(work, cs, adm, idx, {0}, false).value(0);
    CHECK(rel_err(fe.grad(0, j), (fp - fm) / (2 * h)) < 1e-6);
  }
  set_free(work, cs, idx, base);

  // Hessian action under mixed multipliers
  HessianWeights w;
  w.lambda_rows = Eigen::VectorXd::Ones(idx.n_free);
  w.lambda0 = Eigen::VectorXd::Ones(cs.n_islands());
  w.sigma = Eigen::VectorXd::Ones(1);
  w.flow_subset = {0};
  Eigen::SparseMatrix<double> H = constraint_hessian(st, cs, adm, idx, w);
  auto weighted_grad = [&](SystemState& s) {
    StateIndex ix = StateIndex::build(cs, s);
    Eigen::SparseMatrix<double> DFw;
    Eigen::MatrixXd DF0w;
    eval_jacobian(s, cs, adm, ix, DFw, DF0w);
    FlowEval fw = eval_flow_constraints(s, cs, adm, ix, w.flow_subset);
    Eigen::VectorXd g = DFw.transpose() * w.lambda_rows + DF0w.transpose() * w.lambda0 +
                        fw.grad.transpose() * w.sigma;
    return g;
  };
  Eigen::MatrixXd fdH(idx.n_free, idx.n_free);
  for (int j = 0; j < idx.n_free; j++) {
    Eigen::VectorXd vp = base, vm = base;
    vp(j) += h;
    vm(j) -= h;
    set_free(work, cs, idx, vp);
    Eigen::VectorXd gp = weighted_grad(work);
    set_free(work, cs, idx, vm);
    Eigen::VectorXd gm = weighted_grad(work);
    fdH.col(j) = (gp - gm) / (2 * h);
  }
  CHECK(max_rel_err(Eigen::MatrixXd(H), fdH) < 1e-5);

  // the full solve clears this network too
  DispatchSolution sol = solve_dispatch(cs, {});
  CHECK(sol.converged);
  CHECK(sol.report.final_feas <= 1e-6);
}

TEST_CASE("pv bus releases its pin once the voltage crosses back") {
  CaseModel cs = load_fixture("case3ramp");
  AdmittanceStructure adm = build_admittance(cs, 1);
  SystemState st = flat_state(cs, 1);
  st.kind[1] = BusKind::PQ;
  st.pinned[1] = +1;
  st.q_pin(1) = cs.buses[1].q_max;

  SUBCASE("inside the hysteresis band: stays pinned") {
    st.vm(1) = cs.buses[1].v_set + 5e-5;
    CHECK(pv_pq_switch(st, cs, adm) == 0);
    CHECK(st.kind[1] == BusKind::PQ);
  }
  SUBCASE("above the band: reverts to PV at the setpoint") {
    st.vm(1) = cs.buses[1].v_set + 5e-4;
    CHECK(pv_pq_switch(st, cs, adm) == 1);
    CHECK(st.kind[1] == BusKind::PV);
    CHECK(st.pinned[1] == 0);
    CHECK(st.vm(1) == cs.buses[1].v_set);
  }
  SUBCASE("pinned at q_min releases downward") {
    st.pinned[1] = -1;
    st.q_pin(1) = cs.buses[1].q_min;
    st.vm(1) = cs.buses[1].v_set - 5e-4;
    CHECK(pv_pq_switch(st, cs, adm) == 1);
    CHECK(st.kind[1] == BusKind::PV);
  }
}
