#include "dispatch/diagnostics.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "dispatch/qpsolve.hpp"
#include "dispatch/reduction.hpp"

namespace dispatch {

namespace {

size_t su(int i) { return static_cast<size_t>(i); }

constexpr double kRankTol = 1e-8;  // relative to the largest singular value

int numeric_rank(const Eigen::MatrixXd& A) {
  if (A.rows() == 0 || A.cols() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  const Eigen::VectorXd& s = svd.singularValues();
  const double thresh = kRankTol * s(0);
  int r = 0;
  for (int i = 0; i < s.size(); i++)
    if (s(i) > thresh) r++;
  return r;
}

}  // namespace

ActiveGradients active_constraint_gradients(const DispatchSolution& sol, const CaseModel& cs,
                                            double tol_active) {
  if (!sol.converged) throw NotConverged("active set requires a converged solution");
  const int nb = cs.n_bids(), T = cs.T;
  const int nv = nb * T;
  const ReducedQP& qp = sol.final_qp;

  ActiveGradients ag;
  std::vector<Eigen::VectorXd> rows;
  auto push = [&](const Eigen::VectorXd& g, const std::string& label, bool nonlinear,
                  bool equality, double dual) {
    rows.push_back(g);
    ag.labels.push_back(label);
    ag.nonlinear.push_back(nonlinear);
    ag.equality.push_back(equality);
    ag.duals.push_back(dual);
  };

  for (int t = 0; t < T; t++) {
    const ReducedBlocks& blk = qp.hours[su(t)];
    for (int isl = 0; isl < blk.L0.rows(); isl++) {
      Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
      g.segment(t * nb, nb) = blk.L0.row(isl);
      push(g, "balance island " + std::to_string(cs.island_ids[su(isl)]) + " hour " +
               std::to_string(t),
           true, true, sol.lambda0[su(t)](isl) / cs.base_mva);
    }
    for (int r = 0; r < blk.S.rows(); r++) {
      // rS at the solution is the row slack (the state correction is ~0)
      if (blk.rS(r) > tol_active) continue;
      Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
      g.segment(t * nb, nb) = blk.S.row(r);
      push(g, "flow " + cs.flow_constraints[su(qp.s_rows[su(t)][su(r)])].id + " hour " +
               std::to_string(t),
           true, false, sol.sigma[su(t)](r) / cs.base_mva);
    }
  }
  for (int r = 0; r < qp.IT.rows(); r++) {
    if (qp.r_it(r) > tol_active) continue;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
    for (int c = 0; c < qp.IT.outerSize(); c++)
      for (Eigen::SparseMatrix<double>::InnerIterator it(qp.IT, c); it; ++it)
        if (it.row() == r) g(it.col()) = it.value();
    const double dual = sol.mu_it.size() > r ? sol.mu_it(r) / cs.base_mva : 0.0;
    push(g, sol.it_labels[su(r)], false, false, dual);
  }
  for (int t = 0; t < T; t++)
    for (int j = 0; j < nb; j++) {
      const Bid& bid = cs.bids[su(j)];
      const double x = sol.x(j, t);
      if (x - bid.lb[su(t)] <= tol_active) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
        g(t * nb + j) = -1.0;
        push(g, "lb " + bid.id + " hour " + std::to_string(t), false, false,
             sol.pi_lb.size() ? sol.pi_lb(j, t) / cs.base_mva : 0.0);
      }
      if (bid.ub[su(t)] - x <= tol_active) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(nv);
        g(t * nb + j) = 1.0;
        push(g, "ub " + bid.id + " hour " + std::to_string(t), false, false,
             sol.pi_ub.size() ? sol.pi_ub(j, t) / cs.base_mva : 0.0);
      }
    }

  ag.rows.resize(static_cast<Eigen::Index>(rows.size()), nv);
  for (size_t i = 0; i < rows.size(); i++) ag.rows.row(static_cast<Eigen::Index>(i)) = rows[i];
  return ag;
}

RankReport check_licq(const Eigen::MatrixXd& gradients) {
  RankReport rep;
  rep.rows = static_cast<int>(gradients.rows());
  rep.rank = numeric_rank(gradients);
  rep.deficiency = rep.rows - rep.rank;
  rep.holds = rep.deficiency == 0;
  return rep;
}

MfcqResult check_mfcq(const DispatchSolution& sol, const CaseModel& cs) {
  MfcqResult res;
  ActiveGradients ag = active_constraint_gradients(sol, cs);
  const int nv = static_cast<int>(ag.rows.cols());

  std::vector<int> eq_rows, in_rows;
  for (size_t i = 0; i < ag.labels.size(); i++)
    (ag.equality[i] ? eq_rows : in_rows).push_back(static_cast<int>(i));

  Eigen::MatrixXd Aeq(static_cast<Eigen::Index>(eq_rows.size()), nv);
  for (size_t i = 0; i < eq_rows.size(); i++) Aeq.row(static_cast<Eigen::Index>(i)) = ag.rows.row(eq_rows[i]);
  res.equalities_independent = numeric_rank(Aeq) == static_cast<int>(eq_rows.size());

  // a direction strictly inside every active inequality, within the
  // equality null space: min 1/2|d|^2 s.t. Aeq d = 0, A_in d <= -1
  DenseQP qp;
  qp.H = Eigen::MatrixXd::Identity(nv, nv);
  qp.c = Eigen::VectorXd::Zero(nv);
  qp.Aeq = Aeq;
  qp.beq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(eq_rows.size()));
  qp.Ain.resize(static_cast<Eigen::Index>(in_rows.size()), nv);
  for (size_t i = 0; i < in_rows.size(); i++) qp.Ain.row(static_cast<Eigen::Index>(i)) = ag.rows.row(in_rows[i]);
  qp.bin = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(in_rows.size()), -1.0);
  qp.lb = Eigen::VectorXd::Constant(nv, -kInf);
  qp.ub = Eigen::VectorXd::Constant(nv, kInf);
  for (int i : in_rows) qp.in_labels.push_back(ag.labels[su(i)]);
  for (int i : eq_rows) qp.eq_labels.push_back(ag.labels[su(i)]);
  try {
    DenseQPResult r = solve_dense_qp(qp);
    res.strict_point_exists = true;
    res.direction = r.z.norm() > 0 ? Eigen::VectorXd(r.z / r.z.norm()) : r.z;
  } catch (const QPInfeasible& e) {
    res.strict_point_exists = in_rows.empty();
    res.detail = e.what();
  }
  if (in_rows.empty()) {
    res.strict_point_exists = true;
    res.direction = Eigen::VectorXd::Zero(nv);
  }
  res.holds = res.equalities_independent && res.strict_point_exists;
  return res;
}

ComplementarityReport check_strict_complementarity(const DispatchSolution& sol,
                                                   const CaseModel& cs, double tol) {
  ComplementarityReport rep;
  ActiveGradients ag = active_constraint_gradients(sol, cs);
  for (size_t i = 0; i < ag.labels.size(); i++) {
    if (std::abs(ag.duals[i]) > tol) continue;
    rep.degenerate_rows.push_back(ag.labels[i]);
    if (ag.nonlinear[i]) rep.degenerate_nonlinear_rows.push_back(ag.labels[i]);
  }
  rep.holds_all = rep.degenerate_rows.empty();
  rep.holds_nonlinear = rep.degenerate_nonlinear_rows.empty();
  return rep;
}

UniquenessVerdict nodal_price_uniqueness(const DispatchSolution& sol, const CaseModel& cs) {
  UniquenessVerdict v;
  ActiveGradients ag = active_constraint_gradients(sol, cs);
  std::vector<int> nl;
  for (size_t i = 0; i < ag.labels.size(); i++)
    if (ag.nonlinear[i]) nl.push_back(static_cast<int>(i));
  const int m = static_cast<int>(nl.size());
  Eigen::MatrixXd G(m, ag.rows.cols());
  for (int i = 0; i < m; i++) G.row(i) = ag.rows.row(nl[su(i)]);

  v.nonlinear_gradients_independent = numeric_rank(G) == m;
  if (v.nonlinear_gradients_independent) {
    v.duals_unique = true;
    v.prices_unique = true;
    v.detail = "nonlinear active gradients independent";
    return v;
  }

  // alternative-dual directions: null space of G^T (combinations of the
  // nonlinear rows that cancel in the stationarity equation)
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(G.transpose(), Eigen::ComputeFullV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double thresh = s.size() ? kRankTol * s(0) : 0.0;
  std::vector<Eigen::VectorXd> null_dirs;
  for (int i = 0; i < svd.matrixV().cols(); i++)
    if (i >= s.size() || s(i) <= thresh) null_dirs.push_back(svd.matrixV().col(i));
  v.duals_unique = null_dirs.empty();

  // prices stay unique if every null direction leaves all bus values fixed;
  // bus-level sensitivities come from one adjoint pass per hour
  bool prices_fixed = true;
  for (int t = 0; t < cs.T && prices_fixed; t++) {
    const SystemState& st = sol.states[su(t)];
    AdmittanceStructure adm = build_admittance(cs, t);
    StateIndex idx = StateIndex::build(cs, st);
    Eigen::SparseMatrix<double> DF;
    Eigen::MatrixXd DF0;
    eval_jacobian(st, cs, adm, idx, DF, DF0);
    LuHandle lu = idx.n_free > 0 ? LuHandle::factorize(DF) : LuHandle();
    FlowEval fe = eval_flow_constraints(st, cs, adm, idx, sol.active_flow[su(t)], true);

    // bus-level row per nonlinear active constraint of this hour
    std::vector<Eigen::VectorXd> bus_rows(su(m), Eigen::VectorXd::Zero(cs.n_buses()));
    for (int i = 0; i < m; i++) {
      const std::string& label = ag.labels[su(nl[su(i)])];
      const std::string suffix = " hour " + std::to_string(t);
      if (label.size() < suffix.size() ||
          label.compare(label.size() - suffix.size(), suffix.size(), suffix) != 0)
        continue;
      Eigen::VectorXd w;
      if (label.rfind("balance island", 0) == 0) {
        const int isl = std::stoi(label.substr(15));
        if (idx.n_free > 0) w = lu.solve_transpose(DF0.row(cs.island_index(isl)).transpose());
        for (int b = 0; b < cs.n_buses(); b++) {
          if (cs.island_of_bus(b) != cs.island_index(isl)) continue;
          const int prow = idx.p_row_of_bus[su(b)];
          bus_rows[su(i)](b) = prow >= 0 ? -w(prow) : 1.0;
        }
      } else if (label.rfind("flow ", 0) == 0) {
        // locate the S row within this hour's active set
        for (size_t r = 0; r < sol.active_flow[su(t)].size(); r++) {
          const std::string id = cs.flow_constraints[su(sol.active_flow[su(t)][r])].id;
          if (label == "flow " + id + " hour " + std::to_string(t)) {
            if (idx.n_free > 0)
              w = lu.solve_transpose(fe.grad.row(static_cast<Eigen::Index>(r)).transpose());
            for (int b = 0; b < cs.n_buses(); b++) {
              const int prow = idx.p_row_of_bus[su(b)];
              if (prow >= 0) bus_rows[su(i)](b) = w(prow);
            }
            break;
          }
        }
      }
    }
    for (const Eigen::VectorXd& dir : null_dirs) {
      Eigen::VectorXd dprice = Eigen::VectorXd::Zero(cs.n_buses());
      for (int i = 0; i < m; i++) dprice += dir(i) * bus_rows[su(i)];
      if (dprice.cwiseAbs().maxCoeff() > 1e-8) prices_fixed = false;
    }
  }
  v.prices_unique = prices_fixed;
  std::ostringstream os;
  os << null_dirs.size() << " alternative-dual direction(s); bus prices "
     << (prices_fixed ? "invariant" : "affected");
  v.detail = os.str();
  return v;
}

std::vector<double> check_flat_start_convexity(const CaseModel& cs) {
  std::vector<double> out;
  for (int t = 0; t < cs.T; t++) {
    AdmittanceStructure adm = build_admittance(cs, t);
    SystemState st = flat_state(cs, t);
    StateIndex idx = StateIndex::build(cs, st);
    HessianWeights w;
    w.lambda_rows = Eigen::VectorXd::Zero(idx.n_free);
    for (int i = 0; i < cs.n_buses(); i++)
      if (idx.p_row_of_bus[su(i)] >= 0) w.lambda_rows(idx.p_row_of_bus[su(i)]) = 1.0;
    w.lambda0 = Eigen::VectorXd::Ones(cs.n_islands());
    w.sigma = Eigen::VectorXd(0);
    w.flow_subset = {};
    Eigen::SparseMatrix<double> H = constraint_hessian(st, cs, adm, idx, w);
    if (idx.n_free == 0) {
      out.push_back(0.0);
      continue;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(H)};
    out.push_back(es.eigenvalues().minCoeff());
  }
  return out;
}

RegularityReport run_diagnostics(const DispatchSolution& sol, const CaseModel& cs) {
  RegularityReport rep;
  ActiveGradients ag = active_constraint_gradients(sol, cs);
  rep.licq = check_licq(ag.rows);
  rep.mfcq = check_mfcq(sol, cs);
  rep.complementarity = check_strict_complementarity(sol, cs);
  rep.uniqueness = nodal_price_uniqueness(sol, cs);
  rep.flat_start_min_eig = check_flat_start_convexity(cs);

  if (!rep.licq.holds) {
    // attribute the rank loss to bid-hours via the null direction
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(ag.rows, Eigen::ComputeFullV);
    Eigen::VectorXd dir = svd.matrixV().col(svd.matrixV().cols() - 1).cwiseAbs();
    std::ostringstream os;
    os << "rank deficiency " << rep.licq.deficiency << "; largest participation:";
    for (int rep_i = 0; rep_i < 3 && rep_i < dir.size(); rep_i++) {
      int arg = 0;
      dir.maxCoeff(&arg);
      const int t = arg / cs.n_bids(), j = arg % cs.n_bids();
      os << " " << cs.bids[su(j)].id << "@h" << t;
      dir(arg) = 0;
    }
    rep.weak_locations.push_back(os.str());
  }
  return rep;
}

std::string format_regularity_report(const RegularityReport& rep, const CaseModel& cs) {
  std::ostringstream os;
  os << "regularity report";
  if (!cs.name.empty()) os << " for " << cs.name;
  os << "\n";
  os << "licq: " << (rep.licq.holds ? "holds" : "fails") << "  rows " << rep.licq.rows
     << "  rank " << rep.licq.rank << "  deficiency " << rep.licq.deficiency << "\n";
  os << "mfcq: " << (rep.mfcq.holds ? "holds" : "fails")
     << "  equalities_independent " << (rep.mfcq.equalities_independent ? "yes" : "no")
     << "  strict_point " << (rep.mfcq.strict_point_exists ? "yes" : "no") << "\n";
  os << "strict_complementarity: " << (rep.complementarity.holds_all ? "holds" : "fails")
     << "  nonlinear_rows " << (rep.complementarity.holds_nonlinear ? "hold" : "fail") << "\n";
  for (const auto& r : rep.complementarity.degenerate_rows)
    os << "  degenerate: " << r << "\n";
  os << "nodal_prices: " << (rep.uniqueness.prices_unique ? "unique" : "not unique")
     << "  duals " << (rep.uniqueness.duals_unique ? "unique" : "not unique") << "  ("
     << rep.uniqueness.detail << ")\n";
  os << "flat_start_min_eigenvalue:";
  for (size_t t = 0; t < rep.flat_start_min_eig.size(); t++)
    os << " " << rep.flat_start_min_eig[t];
  os << "\n";
  for (const auto& w : rep.weak_locations) os << "weak: " << w << "\n";
  return os.str();
}

}  // namespace dispatch
