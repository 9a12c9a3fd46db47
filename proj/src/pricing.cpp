#include "dispatch/pricing.hpp"

#include <cmath>

#include "dispatch/reduction.hpp"

namespace dispatch {

namespace {

size_t su(int i) { return static_cast<size_t>(i); }

// Per-bus locational value components at one hour, internal units.
struct BusValues {
  Eigen::VectorXd energy, loss, congestion;
};

BusValues bus_values(const DispatchSolution& sol, const CaseModel& cs, int t) {
  const int n = cs.n_buses();
  BusValues bv;
  bv.energy.resize(n);
  bv.loss = Eigen::VectorXd::Zero(n);
  bv.congestion = Eigen::VectorXd::Zero(n);

  const SystemState& st = sol.states[su(t)];
  AdmittanceStructure adm = build_admittance(cs, t);
  StateIndex idx = StateIndex::build(cs, st);
  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  eval_jacobian(st, cs, adm, idx, DF, DF0);
  LuHandle lu = idx.n_free > 0 ? LuHandle::factorize(DF) : LuHandle();
  FlowEval fe = eval_flow_constraints(st, cs, adm, idx, sol.active_flow[su(t)], true);

  std::vector<Eigen::VectorXd> w0(su(cs.n_islands()));
  for (int isl = 0; isl < cs.n_islands(); isl++)
    if (idx.n_free > 0) w0[su(isl)] = lu.solve_transpose(DF0.row(isl).transpose());
  std::vector<Eigen::VectorXd> wk(su(fe.grad.rows()));
  for (int k = 0; k < fe.grad.rows(); k++)
    if (idx.n_free > 0) wk[su(k)] = lu.solve_transpose(fe.grad.row(k).transpose());

  for (int i = 0; i < n; i++) {
    const int isl = cs.island_of_bus(i);
    const double lam0 = sol.lambda0[su(t)](isl);
    bv.energy(i) = lam0;
    const int prow = idx.p_row_of_bus[su(i)];
    if (prow < 0) continue;  // swing: pure energy price
    const double l0_bus = -w0[su(isl)](prow);
    bv.loss(i) = lam0 * (l0_bus - 1.0);
    double cong = 0.0;
    for (int k = 0; k < fe.grad.rows(); k++)
      cong -= sol.sigma[su(t)](k) * wk[su(k)](prow);
    bv.congestion(i) = cong;
  }
  return bv;
}

bool it_row_binds_bid_hour(const DispatchSolution& sol, const CaseModel& cs, int bid, int t,
                           bool ramp_rows, double tol) {
  const ReducedQP& qp = sol.final_qp;
  const int nb = cs.n_bids();
  // r_it in final_qp is b - IT*x at the solution, i.e. the row slack
  for (int r = 0; r < qp.IT.rows(); r++) {
    const std::string& label = sol.it_labels[su(r)];
    const bool is_ramp = label.rfind("ramp", 0) == 0;
    if (is_ramp != ramp_rows) continue;
    if (qp.r_it(r) > tol) continue;  // not binding
    if (qp.IT.coeff(r, t * nb + bid) != 0.0) return true;
  }
  return false;
}

}  // namespace

const char* to_string(UnitPosition p) {
  switch (p) {
    case UnitPosition::at_lb: return "at_lb";
    case UnitPosition::at_ub: return "at_ub";
    case UnitPosition::interior: return "interior";
    case UnitPosition::ramp_bound: return "ramp_bound";
    case UnitPosition::energy_bound: return "energy_bound";
  }
  return "?";
}

std::vector<NodalPrice> compute_lmps(const DispatchSolution& sol, const CaseModel& cs) {
  if (!sol.converged) throw NotConverged("LMPs require a converged solution");
  std::vector<NodalPrice> out;
  for (int t = 0; t < cs.T; t++) {
    BusValues bv = bus_values(sol, cs, t);
    for (int i = 0; i < cs.n_buses(); i++) {
      NodalPrice p;
      p.bus = i;
      p.hour = t;
      p.energy = bv.energy(i) / cs.base_mva;
      p.loss = bv.loss(i) / cs.base_mva;
      p.congestion = bv.congestion(i) / cs.base_mva;
      p.lmp = p.energy + p.loss + p.congestion;
      out.push_back(p);
    }
  }
  return out;
}

std::vector<UnitEconomics> marginal_profits(const DispatchSolution& sol, const CaseModel& cs) {
  if (!sol.converged) throw NotConverged("marginal profits require a converged solution");
  std::vector<UnitEconomics> out;
  constexpr double pos_tol = 1e-7;  // p.u.
  for (int t = 0; t < cs.T; t++) {
    BusValues bv = bus_values(sol, cs, t);
    for (int j = 0; j < cs.n_bids(); j++) {
      const Bid& bid = cs.bids[su(j)];
      UnitEconomics ue;
      ue.bid = j;
      ue.hour = t;
      const double value =
          bv.energy(bid.bus) + bv.loss(bid.bus) + bv.congestion(bid.bus);
      ue.pi = (value - bid.price[su(t)] * cs.base_mva) / cs.base_mva;
      const double x = sol.x(j, t);
      // binding intertemporal rows take precedence: their dual owns pi there
      if (it_row_binds_bid_hour(sol, cs, j, t, true, pos_tol))
        ue.position = UnitPosition::ramp_bound;
      else if (it_row_binds_bid_hour(sol, cs, j, t, false, pos_tol))
        ue.position = UnitPosition::energy_bound;
      else if (x - bid.lb[su(t)] <= pos_tol)
        ue.position = UnitPosition::at_lb;
      else if (bid.ub[su(t)] - x <= pos_tol)
        ue.position = UnitPosition::at_ub;
      else
        ue.position = UnitPosition::interior;
      out.push_back(ue);
    }
  }
  return out;
}

EquilibriumReport equilibrium_check(const DispatchSolution& sol, const CaseModel& cs, double tol) {
  EquilibriumReport rep;
  constexpr double pos_tol = 1e-7;
  for (int t = 0; t < cs.T; t++) {
    BusValues bv = bus_values(sol, cs, t);
    for (int j = 0; j < cs.n_bids(); j++) {
      const Bid& bid = cs.bids[su(j)];
      const double value = bv.energy(bid.bus) + bv.loss(bid.bus) + bv.congestion(bid.bus);
      const double pi = (value - bid.price[su(t)] * cs.base_mva) / cs.base_mva;
      const double x = sol.x(j, t);
      EquilibriumEntry e;
      e.bid = j;
      e.hour = t;
      const bool it_bound = it_row_binds_bid_hour(sol, cs, j, t, true, pos_tol) ||
                            it_row_binds_bid_hour(sol, cs, j, t, false, pos_tol);
      if (it_bound) {
        e.violation = 0.0;  // attributed to the intertemporal dual
      } else if (bid.ub[su(t)] - x <= pos_tol) {
        e.violation = std::min(0.0, pi);  // at max: profit must be >= 0
      } else if (x - bid.lb[su(t)] <= pos_tol) {
        e.violation = std::max(0.0, pi);  // at min: profit must be <= 0
      } else {
        e.violation = pi;  // marginal unit: zero profit
      }
      rep.entries.push_back(e);
      rep.max_violation = std::max(rep.max_violation, std::abs(e.violation));
    }
  }
  rep.passed = rep.max_violation <= tol;
  return rep;
}

}  // namespace dispatch
