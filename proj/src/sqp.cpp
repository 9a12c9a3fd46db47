#include "dispatch/sqp.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

namespace dispatch {

namespace {

constexpr double kActivationBand = 1e-4;  // p.u., about-to-bind margin
constexpr double kFreezeFactor = 10.0;    // typing freeze threshold vs tol_feas

size_t su(int i) { return static_cast<size_t>(i); }

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

// Up to `steps` Newton corrections at fixed volumes; keeps the best state.
void newton_polish(SystemState& st, const CaseModel& cs, const AdmittanceStructure& adm,
                   const Eigen::VectorXd& x, int steps) {
  StateIndex idx = StateIndex::build(cs, st);
  if (idx.n_free == 0) return;
  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  double best = eval_balance(st, cs, adm, x).rows.cwiseAbs().maxCoeff();
  SystemState best_state = st;
  for (int k = 0; k < steps; k++) {
    BalanceResidual res = eval_balance(st, cs, adm, x);
    eval_jacobian(st, cs, adm, idx, DF, DF0);
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(DF);
    if (lu.info() != Eigen::Success) break;
    Eigen::VectorXd dy = lu.solve(-res.rows);
    if (!dy.allFinite()) break;
    for (int i = 0; i < cs.n_buses(); i++) {
      if (idx.ang_of_bus[su(i)] >= 0) st.theta(i) += dy(idx.ang_of_bus[su(i)]);
      if (idx.vm_of_bus[su(i)] >= 0) st.vm(i) = std::max(0.05, st.vm(i) + dy(idx.vm_of_bus[su(i)]));
    }
    const double err = eval_balance(st, cs, adm, x).rows.cwiseAbs().maxCoeff();
    if (err < best) {
      best = err;
      best_state = st;
    } else {
      break;
    }
  }
  st = best_state;
}

std::string describe_weak_rows(const CaseModel& cs, const StateIndex& idx,
                               const Eigen::SparseMatrix<double>& DF) {
  // participation of each bus in the smallest singular direction
  if (idx.n_free == 0 || idx.n_free > 2000) return "";
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(DF), Eigen::ComputeFullV);
  Eigen::VectorXd v = svd.matrixV().col(idx.n_free - 1).cwiseAbs();
  std::vector<std::pair<double, int>> score;
  for (int i = 0; i < cs.n_buses(); i++) {
    double s = 0;
    if (idx.ang_of_bus[su(i)] >= 0) s = std::max(s, v(idx.ang_of_bus[su(i)]));
    if (idx.vm_of_bus[su(i)] >= 0) s = std::max(s, v(idx.vm_of_bus[su(i)]));
    if (s > 0) score.emplace_back(s, i);
  }
  std::sort(score.rbegin(), score.rend());
  std::ostringstream os;
  for (size_t k = 0; k < std::min<size_t>(5, score.size()); k++) {
    if (k) os << ", ";
    os << cs.buses[su(score[k].second)].id << " (" << score[k].first << ")";
  }
  return os.str();
}

}  // namespace

SqpDriver::SqpDriver(const CaseModel& cs, const SolverOptions& opts)
    : cs_(cs), opts_(opts), inc_(bid_incidence(cs)) {
  ValidationReport rep = validate_case(cs_);
  if (!rep.ok()) throw ValidationError("invalid case: " + rep.to_string());

  adms_.reserve(su(cs_.T));
  for (int t = 0; t < cs_.T; t++) adms_.push_back(build_admittance(cs_, t));

  // intertemporal rows: ramps (including hour 1 against p_initial) and
  // session energy bounds per group
  const int nb = cs_.n_bids(), T = cs_.T;
  std::vector<Eigen::Triplet<double>> trips;
  std::vector<double> rhs;
  auto var = [&](int t, int j) { return t * nb + j; };
  for (int j = 0; j < nb; j++) {
    const Bid& bid = cs_.bids[su(j)];
    if (std::isfinite(bid.ramp_up)) {
      for (int t = 0; t < T; t++) {
        const int row = static_cast<int>(rhs.size());
        trips.emplace_back(row, var(t, j), 1.0);
        if (t > 0) trips.emplace_back(row, var(t - 1, j), -1.0);
        rhs.push_back(bid.ramp_up + (t == 0 ? bid.p_initial : 0.0));
        it_labels_.push_back("ramp up " + bid.id + " hour " + std::to_string(t));
      }
    }
    if (std::isfinite(bid.ramp_down)) {
      for (int t = 0; t < T; t++) {
        const int row = static_cast<int>(rhs.size());
        trips.emplace_back(row, var(t, j), -1.0);
        if (t > 0) trips.emplace_back(row, var(t - 1, j), 1.0);
        rhs.push_back(bid.ramp_down - (t == 0 ? bid.p_initial : 0.0));
        it_labels_.push_back("ramp down " + bid.id + " hour " + std::to_string(t));
      }
    }
  }
  for (const EnergyGroup& g : cs_.energy_groups) {
    if (std::isfinite(g.e_max)) {
      const int row = static_cast<int>(rhs.size());
      for (int t = 0; t < T; t++)
        for (int j : g.members) trips.emplace_back(row, var(t, j), 1.0);
      rhs.push_back(g.e_max);
      it_labels_.push_back("energy max " + g.id);
    }
    {
      const int row = static_cast<int>(rhs.size());
      for (int t = 0; t < T; t++)
        for (int j : g.members) trips.emplace_back(row, var(t, j), -1.0);
      rhs.push_back(-g.e_min);
      it_labels_.push_back("energy min " + g.id);
    }
  }
  IT_.resize(static_cast<int>(rhs.size()), nb * T);
  IT_.setFromTriplets(trips.begin(), trips.end());
  b_it_ = Eigen::Map<Eigen::VectorXd>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));

  // flat-start system price proxy: median bid price over the session
  std::vector<double> prices;
  for (const Bid& bid : cs_.bids)
    for (double p : bid.price) prices.push_back(p);
  std::sort(prices.begin(), prices.end());
  const size_t np = prices.size();
  lambda0_proxy_ = np == 0 ? 1.0
                 : (np % 2 ? prices[np / 2] : 0.5 * (prices[np / 2 - 1] + prices[np / 2]));
  lambda0_proxy_ *= cs_.base_mva;  // internal units
}

Eigen::VectorXd SqpDriver::internal_prices(int t) const {
  Eigen::VectorXd c(cs_.n_bids());
  for (int j = 0; j < cs_.n_bids(); j++) c(j) = cs_.bids[su(j)].price[su(t)] * cs_.base_mva;
  return c;
}

void SqpDriver::parallel_tasks(int count, const std::function<void(int)>& fn) const {
  const double start = now_seconds();
  const int workers = std::max(1, std::min(opts_.workers, count));
  if (workers == 1) {
    for (int t = 0; t < count; t++) fn(t);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(su(workers));
    for (int w = 0; w < workers; w++) {
      pool.emplace_back([&, w]() {
        try {
          for (int t = w; t < count; t += workers) fn(t);
        } catch (...) {
          errs[su(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  }
  parallel_seconds_ += now_seconds() - start;
}

void SqpDriver::parallel_hours(const std::function<void(int)>& fn) const {
  parallel_tasks(cs_.T, fn);
}

Iterate SqpDriver::flat_start_iterate() const {
  Iterate it;
  const int nb = cs_.n_bids(), T = cs_.T;
  it.x.resize(nb, T);
  for (int j = 0; j < nb; j++) {
    const Bid& bid = cs_.bids[su(j)];
    for (int t = 0; t < T; t++)
      it.x(j, t) = std::clamp(bid.p_initial, bid.lb[su(t)], bid.ub[su(t)]);
  }
  it.hours.resize(su(T));
  it.lambda0.resize(su(T));
  it.sigma.resize(su(T));
  it.pi = Eigen::MatrixXd::Zero(nb, T);
  it.pi_lb = Eigen::MatrixXd::Zero(nb, T);
  it.pi_ub = Eigen::MatrixXd::Zero(nb, T);
  it.relaxed.assign(su(T), std::vector<char>(cs_.flow_constraints.size(), 0));

  parallel_hours([&](int t) {
    HourWork& hw = it.hours[su(t)];
    hw.state = flat_state(cs_, t);
    hw.adm = adms_[su(t)];
    hw.idx = StateIndex::build(cs_, hw.state);
    hw.res = eval_balance(hw.state, cs_, hw.adm, it.x.col(t));
    std::vector<int> all_rows(cs_.flow_constraints.size());
    for (size_t k = 0; k < all_rows.size(); k++) all_rows[k] = static_cast<int>(k);
    hw.flow_values = eval_flow_constraints(hw.state, cs_, hw.adm, hw.idx, all_rows, false).value;

    // Adjoint multiplier reconstruction at flat start: sigma = 0, lambda0 = proxy.
    Eigen::SparseMatrix<double> DF;
    Eigen::MatrixXd DF0;
    eval_jacobian(hw.state, cs_, hw.adm, hw.idx, DF, DF0);
    hw.lu = LuHandle::factorize(DF);
    Eigen::VectorXd lam0 = Eigen::VectorXd::Constant(cs_.n_islands(), lambda0_proxy_);
    if (hw.idx.n_free > 0)
      hw.lambda_rows = hw.lu.solve_transpose(-(DF0.transpose() * lam0));
    else
      hw.lambda_rows = Eigen::VectorXd(0);
    it.lambda0[su(t)] = lam0;
    it.sigma[su(t)] = Eigen::VectorXd(0);
  });
  it.feas_error = feasibility_error(it);
  return it;
}

void SqpDriver::manage_active_set(Iterate& it) const {
  for (int t = 0; t < cs_.T; t++) {
    HourWork& hw = it.hours[su(t)];
    for (int k = 0; k < static_cast<int>(cs_.flow_constraints.size()); k++) {
      const double limit = cs_.flow_constraints[su(k)].limit[su(t)];
      if (hw.flow_values(k) < limit - kActivationBand) continue;
      if (std::find(hw.active_set.begin(), hw.active_set.end(), k) != hw.active_set.end())
        continue;
      hw.active_set.push_back(k);
      Eigen::VectorXd s(it.sigma[su(t)].size() + 1);
      s << it.sigma[su(t)], 0.0;
      it.sigma[su(t)] = s;
    }
  }
}

void SqpDriver::refresh_residuals(Iterate& it) const {
  parallel_hours([&](int t) {
    HourWork& hw = it.hours[su(t)];
    hw.res = eval_balance(hw.state, cs_, hw.adm, it.x.col(t));
    std::vector<int> all_rows(cs_.flow_constraints.size());
    for (size_t k = 0; k < all_rows.size(); k++) all_rows[k] = static_cast<int>(k);
    StateIndex idx = StateIndex::build(cs_, hw.state);
    hw.flow_values = eval_flow_constraints(hw.state, cs_, hw.adm, idx, all_rows, false).value;
  });
}

double SqpDriver::balance_error(const Iterate& it) const {
  double err = 0.0;
  for (const HourWork& hw : it.hours) err = std::max(err, hw.res.inf_norm());
  return err;
}

double SqpDriver::constraint_violation(const Iterate& it) const {
  double err = 0.0;
  for (int t = 0; t < cs_.T; t++) {
    const HourWork& hw = it.hours[su(t)];
    for (int k = 0; k < hw.flow_values.size(); k++) {
      if (!it.relaxed.empty() && it.relaxed[su(t)][su(k)]) continue;  // bought at penalty
      err = std::max(err, hw.flow_values(k) - cs_.flow_constraints[su(k)].limit[su(t)]);
    }
  }
  if (IT_.rows() > 0) {
    Eigen::VectorXd xf = Eigen::Map<const Eigen::VectorXd>(it.x.data(), it.x.size());
    err = std::max(err, std::max(0.0, (IT_ * xf - b_it_).maxCoeff()));
  }
  return err;
}

double SqpDriver::feasibility_error(const Iterate& it) const {
  double err = 0.0;
  for (int t = 0; t < cs_.T; t++) {
    const HourWork& hw = it.hours[su(t)];
    err = std::max(err, hw.res.inf_norm());
    for (int k = 0; k < hw.flow_values.size(); k++) {
      if (!it.relaxed.empty() && it.relaxed[su(t)][su(k)]) continue;
      err = std::max(err, hw.flow_values(k) - cs_.flow_constraints[su(k)].limit[su(t)]);
    }
  }
  if (IT_.rows() > 0) {
    Eigen::VectorXd xf = Eigen::Map<const Eigen::VectorXd>(it.x.data(), it.x.size());
    Eigen::VectorXd viol = IT_ * xf - b_it_;
    err = std::max(err, std::max(0.0, viol.maxCoeff()));
  }
  return err;
}

void SqpDriver::eval_hour(Iterate& it, int t) const {
  HourWork& hw = it.hours[su(t)];
  hw.idx = StateIndex::build(cs_, hw.state);
  hw.res = eval_balance(hw.state, cs_, hw.adm, it.x.col(t));
  std::vector<int> all_rows(cs_.flow_constraints.size());
  for (size_t k = 0; k < all_rows.size(); k++) all_rows[k] = static_cast<int>(k);
  hw.flow_values = eval_flow_constraints(hw.state, cs_, hw.adm, hw.idx, all_rows, false).value;

  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  eval_jacobian(hw.state, cs_, hw.adm, hw.idx, DF, DF0);
  try {
    hw.lu = LuHandle::factorize(DF, &hw.lu);
  } catch (const NumericallySingular& e) {
    throw SolvabilityBoundary("hour " + std::to_string(t) + ": " + e.what() +
                                  "; weakest buses: " + describe_weak_rows(cs_, hw.idx, DF),
                              t, -1);
  }

  FlowEval fe = eval_flow_constraints(hw.state, cs_, hw.adm, hw.idx, hw.active_set, true);

  // Nodal multipliers from the adjoint of the Jacobian at the current duals.
  if (hw.idx.n_free > 0) {
    Eigen::VectorXd rhs = DF0.transpose() * it.lambda0[su(t)];
    if (fe.grad.rows() > 0) rhs += fe.grad.transpose() * it.sigma[su(t)];
    hw.lambda_rows = hw.lu.solve_transpose(-rhs);
  } else {
    hw.lambda_rows = Eigen::VectorXd(0);
  }

  // state correction y0 and one solved column per dedup group
  Eigen::VectorXd rF = -hw.res.rows;
  hw.y0 = hw.idx.n_free > 0 ? hw.lu.solve(rF) : Eigen::VectorXd(0);
  hw.group_cols = Eigen::MatrixXd::Zero(std::max(hw.idx.n_free, 1), inc_.n_groups());
  for (int g = 0; g < inc_.n_groups(); g++) {
    const int prow = hw.idx.p_row_of_bus[su(inc_.group_bus[su(g)])];
    if (prow < 0 || hw.idx.n_free == 0) continue;
    Eigen::VectorXd e = Eigen::VectorXd::Zero(hw.idx.n_free);
    e(prow) = 1.0;
    hw.group_cols.col(g).head(hw.idx.n_free) = hw.lu.solve(e);
  }
}

void SqpDriver::reduce_hour(Iterate& it, int t, ReducedQP& qp) const {
  HourWork& hw = it.hours[su(t)];
  ReducedBlocks& blk = qp.hours[su(t)];

  Eigen::SparseMatrix<double> DF;
  Eigen::MatrixXd DF0;
  eval_jacobian(hw.state, cs_, hw.adm, hw.idx, DF, DF0);
  FlowEval fe = eval_flow_constraints(hw.state, cs_, hw.adm, hw.idx, hw.active_set, true);

  reduced_gradients(hw.lu, cs_, inc_, hw.idx, DF0, fe.grad, blk.L0, blk.S);

  // rL = DF0 y0 + swing residual; rS = (limit - G) - DG y0
  blk.rL = hw.res.swing;
  if (hw.idx.n_free > 0) blk.rL += DF0 * hw.y0;
  const int ns = static_cast<int>(hw.active_set.size());
  blk.rS.resize(ns);
  for (int r = 0; r < ns; r++) {
    const int k = hw.active_set[su(r)];
    blk.rS(r) = cs_.flow_constraints[su(k)].limit[su(t)] - hw.flow_values(k);
    if (hw.idx.n_free > 0) blk.rS(r) -= fe.grad.row(r).dot(hw.y0);
  }

  HessianWeights w;
  w.lambda_rows = hw.lambda_rows;
  w.lambda0 = it.lambda0[su(t)];
  w.sigma = it.sigma[su(t)];
  w.flow_subset = hw.active_set;
  Eigen::SparseMatrix<double> H = constraint_hessian(hw.state, cs_, hw.adm, hw.idx, w);

  Eigen::VectorXd rF = -hw.res.rows;
  blk.c_tilde = reduced_cost(internal_prices(t), rF, hw.lu, cs_, inc_, hw.idx, H);
  blk.H_red = reduced_hessian(hw.lu, cs_, inc_, hw.idx, H, &hw.group_cols);
  blk.H_plus = psd_project(blk.H_red);
}

ReducedQP SqpDriver::assemble_subproblem(Iterate& it) const {
  const int nb = cs_.n_bids(), T = cs_.T;
  ReducedQP qp;
  qp.T = T;
  qp.n_bids = nb;
  qp.hours.resize(su(T));
  qp.s_rows.resize(su(T));
  qp.elastic_penalty = opts_.elastic_penalty * cs_.base_mva;

  parallel_hours([&](int t) { eval_hour(it, t); });
  manage_active_set(it);  // fresh flow values, before the reductions
  parallel_hours([&](int t) {
    reduce_hour(it, t, qp);
    qp.s_rows[su(t)].assign(it.hours[su(t)].active_set.begin(), it.hours[su(t)].active_set.end());
  });

  qp.IT = IT_;
  qp.it_labels = it_labels_;
  Eigen::VectorXd xf = Eigen::Map<const Eigen::VectorXd>(it.x.data(), it.x.size());
  qp.r_it = b_it_ - IT_ * xf;
  qp.dlb.resize(nb * T);
  qp.dub.resize(nb * T);
  for (int t = 0; t < T; t++)
    for (int j = 0; j < nb; j++) {
      qp.dlb(t * nb + j) = cs_.bids[su(j)].lb[su(t)] - it.x(j, t);
      qp.dub(t * nb + j) = cs_.bids[su(j)].ub[su(t)] - it.x(j, t);
    }
  it.feas_error = feasibility_error(it);
  return qp;
}

double SqpDriver::equilibrium_residual(const Iterate& it, const ReducedQP& qp) const {
  double worst = 0.0;
  for (int t = 0; t < cs_.T; t++) {
    const ReducedBlocks& blk = qp.hours[su(t)];
    Eigen::VectorXd value = blk.L0.transpose() * it.lambda0[su(t)];
    if (blk.S.rows() > 0) value -= blk.S.transpose() * it.sigma[su(t)];
    Eigen::VectorXd resid = internal_prices(t) + it.pi.col(t) - value;
    worst = std::max(worst, resid.cwiseAbs().maxCoeff());
  }
  return worst;
}

double SqpDriver::line_search(Iterate& it, const QPSolution& sol,
                              std::vector<SystemState>& best_states, int* phase_out,
                              double* merit_before, double* merit_after) const {
  const int nb = cs_.n_bids(), T = cs_.T;
  // The two-phase rule keys on the power-balance error. Once constraint
  // violations dominate the balance error, only the merit function can
  // weigh the trade, so phase 2 takes over.
  const double bal = balance_error(it);
  const int phase =
      (bal > kFreezeFactor * opts_.tol_feas && bal >= constraint_violation(it)) ? 1 : 2;
  if (phase_out) *phase_out = phase;

  double rho = 1.0;
  for (int t = 0; t < T; t++) {
    if (it.hours[su(t)].lambda_rows.size())
      rho = std::max(rho, it.hours[su(t)].lambda_rows.cwiseAbs().maxCoeff());
    rho = std::max(rho, it.lambda0[su(t)].cwiseAbs().maxCoeff());
    if (it.sigma[su(t)].size()) rho = std::max(rho, it.sigma[su(t)].cwiseAbs().maxCoeff());
  }
  if (it.mu_it.size()) rho = std::max(rho, it.mu_it.cwiseAbs().maxCoeff());
  rho *= 2.0;

  auto score_of = [&](const std::vector<SystemState>& states, const Eigen::MatrixXd& x) {
    double sq = 0.0, l1 = 0.0, cost = 0.0;
    for (int t = 0; t < T; t++) {
      BalanceResidual res = eval_balance(states[su(t)], cs_, adms_[su(t)], x.col(t));
      sq += res.rows.squaredNorm() + res.swing.squaredNorm();
      l1 += res.rows.cwiseAbs().sum() + res.swing.cwiseAbs().sum();
      if (phase == 2) {
        cost += internal_prices(t).dot(x.col(t));
        StateIndex idx = StateIndex::build(cs_, states[su(t)]);
        std::vector<int> all_rows(cs_.flow_constraints.size());
        for (size_t k = 0; k < all_rows.size(); k++) all_rows[k] = static_cast<int>(k);
        Eigen::VectorXd G =
            eval_flow_constraints(states[su(t)], cs_, adms_[su(t)], idx, all_rows, false).value;
        for (int k = 0; k < G.size(); k++) {
          const double viol = std::max(0.0, G(k) - cs_.flow_constraints[su(k)].limit[su(t)]);
          if (!it.relaxed.empty() && it.relaxed[su(t)][su(k)])
            cost += opts_.elastic_penalty * cs_.base_mva * viol;
          else
            l1 += viol;
        }
      }
    }
    if (phase == 2 && IT_.rows() > 0) {
      Eigen::VectorXd xf = Eigen::Map<const Eigen::MatrixXd>(x.data(), x.rows(), x.cols())
                               .reshaped();
      l1 += (IT_ * xf - b_it_).cwiseMax(0.0).sum();
    }
    return phase == 1 ? std::sqrt(sq) : cost + rho * l1;
  };

  std::vector<SystemState> current(su(T));
  for (int t = 0; t < T; t++) current[su(t)] = it.hours[su(t)].state;
  const double current_score = score_of(current, it.x);
  if (merit_before) *merit_before = current_score;

  double best_alpha = -1.0, best_score = kInf;
  const double step_norm = sol.dx.cwiseAbs().maxCoeff();
  if (step_norm < 1e-14) {
    best_states = current;
    if (merit_after) *merit_after = current_score;
    return 1.0;
  }

  // all (alpha, hour) trials evaluated in one parallel batch
  constexpr int kAlphas = 11;
  std::vector<double> alphas(kAlphas);
  for (int a = 0; a < kAlphas; a++) alphas[su(a)] = std::pow(0.5, a);
  std::vector<std::vector<SystemState>> trial(su(kAlphas),
                                              std::vector<SystemState>(su(T)));
  std::vector<Eigen::MatrixXd> x_trials(su(kAlphas));
  for (int a = 0; a < kAlphas; a++) {
    x_trials[su(a)] = it.x;
    for (int t = 0; t < T; t++)
      x_trials[su(a)].col(t) += alphas[su(a)] * sol.dx.segment(t * nb, nb);
  }
  parallel_tasks(kAlphas * T, [&](int task) {
    const int a = task / T, t = task % T;
    const double alpha = alphas[su(a)];
    const HourWork& hw = it.hours[su(t)];
    SystemState st = hw.state;
    if (hw.idx.n_free > 0) {
      // state correction from the elimination, scaled to this step length
      Eigen::VectorXd gsum = Eigen::VectorXd::Zero(inc_.n_groups());
      for (int j = 0; j < nb; j++) gsum(inc_.group_of_bid[su(j)]) += sol.dx(t * nb + j);
      Eigen::VectorXd dy = alpha * (hw.y0 + hw.group_cols.topRows(hw.idx.n_free) * gsum);
      for (int i = 0; i < cs_.n_buses(); i++) {
        if (hw.idx.ang_of_bus[su(i)] >= 0) st.theta(i) += dy(hw.idx.ang_of_bus[su(i)]);
        if (hw.idx.vm_of_bus[su(i)] >= 0)
          st.vm(i) = std::max(0.05, st.vm(i) + dy(hw.idx.vm_of_bus[su(i)]));
      }
      newton_polish(st, cs_, adms_[su(t)], x_trials[su(a)].col(t), 2);
    }
    trial[su(a)][su(t)] = st;
  });
  for (int a = 0; a < kAlphas; a++) {
    const double sc = score_of(trial[su(a)], x_trials[su(a)]);
    if (sc < best_score) {
      best_score = sc;
      best_alpha = alphas[su(a)];
      best_states = trial[su(a)];
    }
  }

  if (merit_after) *merit_after = best_score;
  const double slack = 1e-12 * std::max(1.0, std::abs(current_score));
  if (best_alpha < 0 || best_score > current_score + slack)
    throw StepFailure("no step improves the " +
                      std::string(phase == 1 ? "feasibility" : "merit") +
                      " function (current " + std::to_string(current_score) + ", best " +
                      std::to_string(best_score) + ")");
  return best_alpha;
}

void SqpDriver::update_iterate(Iterate& it, double alpha, const QPSolution& sol,
                               const std::vector<SystemState>& new_states,
                               std::vector<std::string>* pv_events) const {
  const int nb = cs_.n_bids(), T = cs_.T;
  for (int t = 0; t < T; t++) {
    it.x.col(t) += alpha * sol.dx.segment(t * nb, nb);
    for (int j = 0; j < nb; j++)
      it.x(j, t) = std::clamp(it.x(j, t), cs_.bids[su(j)].lb[su(t)], cs_.bids[su(j)].ub[su(t)]);
    it.hours[su(t)].state = new_states[su(t)];
  }
  // full dual step
  for (int t = 0; t < T; t++) {
    it.lambda0[su(t)] = sol.lambda0[su(t)];
    it.sigma[su(t)] = sol.sigma[su(t)];
    for (int j = 0; j < nb; j++) {
      it.pi(j, t) = sol.pi(t * nb + j);
      it.pi_lb(j, t) = sol.pi_lb(t * nb + j);
      it.pi_ub(j, t) = sol.pi_ub(t * nb + j);
    }
  }
  it.mu_it = sol.mu_it;

  const bool freeze = it.feas_error <= kFreezeFactor * opts_.tol_feas;
  for (int t = 0; t < T; t++) {
    HourWork& hw = it.hours[su(t)];
    if (freeze) hw.typing_frozen = true;
    if (hw.typing_frozen) continue;
    const std::vector<BusKind> before = hw.state.kind;
    if (pv_pq_switch(hw.state, cs_, hw.adm) > 0 && pv_events) {
      for (int i = 0; i < cs_.n_buses(); i++) {
        if (hw.state.kind[su(i)] == before[su(i)]) continue;
        std::ostringstream os;
        os << "iter " << it.iter << " hour " << t << " bus " << cs_.buses[su(i)].id << " -> "
           << (hw.state.kind[su(i)] == BusKind::PV
                   ? "PV"
                   : (hw.state.pinned[su(i)] > 0 ? "PQ at q_max" : "PQ at q_min"));
        pv_events->push_back(os.str());
      }
    }
  }
}

ConvergenceStatus SqpDriver::check_convergence(const Iterate& it) const {
  const double tol = tol_opt_internal();
  if (it.feas_error <= opts_.tol_feas && it.last_opt_norm <= tol && it.last_eq21 <= tol)
    return ConvergenceStatus::Converged;
  return ConvergenceStatus::Iterate;
}

DispatchSolution SqpDriver::solve() {
  const double t_start = now_seconds();
  parallel_seconds_ = 0.0;
  DispatchSolution out;
  out.base_mva = cs_.base_mva;
  out.report.workers = opts_.workers;

  Iterate it = flat_start_iterate();
  ReducedQP qp;
  std::string failure;

  for (it.iter = 1; it.iter <= opts_.max_iter; it.iter++) {
    qp = assemble_subproblem(it);

    if (it.iter > 1 && check_convergence(it) == ConvergenceStatus::Converged) {
      out.converged = true;
      break;
    }

    QPSolution sol;
    try {
      sol = solve_qp(qp);
    } catch (const QPInfeasible& e) {
      failure = std::string("subproblem infeasible: ") + e.what();
      break;
    }
    if (sol.relaxed)
      for (const auto& rf : sol.relaxed_flow) {
        it.relaxed[su(rf.hour)][su(rf.constraint)] = 1;
        out.report.active_set_events.push_back(
            "iter " + std::to_string(it.iter) + " elastic: flow " +
            cs_.flow_constraints[su(rf.constraint)].id + " hour " + std::to_string(rf.hour) +
            " relaxed by " + std::to_string(rf.amount) + " p.u.");
      }

    IterationLog log;
    log.iter = it.iter;
    log.feas_before = it.feas_error;
    double opt_norm = 0.0;
    for (int t = 0; t < cs_.T; t++) {
      const Eigen::VectorXd hdx =
          qp.hours[su(t)].H_plus * sol.dx.segment(t * cs_.n_bids(), cs_.n_bids());
      if (hdx.size()) opt_norm = std::max(opt_norm, hdx.cwiseAbs().maxCoeff());
    }

    std::vector<SystemState> new_states;
    double alpha;
    try {
      alpha = line_search(it, sol, new_states, &log.phase, &log.merit_before,
                          &log.merit_after);
    } catch (const StepFailure& e) {
      failure = e.what();
      break;
    }
    update_iterate(it, alpha, sol, new_states, &out.report.pv_pq_events);
    refresh_residuals(it);

    it.last_opt_norm = opt_norm;
    it.last_eq21 = equilibrium_residual(it, qp);
    it.feas_error = feasibility_error(it);

    log.alpha = alpha;
    log.feas_after = it.feas_error;
    log.opt_norm = opt_norm / cs_.base_mva;
    log.eq21_resid = it.last_eq21 / cs_.base_mva;
    int rows = 0;
    for (const auto& hw : it.hours) rows += static_cast<int>(hw.active_set.size());
    log.active_rows = rows;
    out.report.log.push_back(log);
    if (opts_.verbose)
      std::fprintf(stderr,
                   "iter %2d phase %d alpha %.4g feas %.3e -> %.3e opt %.3e eq21 %.3e rows %d\n",
                   log.iter, log.phase, log.alpha, log.feas_before, log.feas_after, log.opt_norm,
                   log.eq21_resid, log.active_rows);
  }

  out.report.iterations = static_cast<int>(out.report.log.size());
  out.report.final_feas = it.feas_error;
  out.report.final_opt = it.last_opt_norm / cs_.base_mva;
  out.report.final_eq21 = it.last_eq21 / cs_.base_mva;
  out.report.converged = out.converged;
  out.report.wall_seconds = now_seconds() - t_start;
  out.report.parallel_seconds = parallel_seconds_;

  for (int t = 0; t < cs_.T; t++) {
    const auto& hw = it.hours[su(t)];
    std::ostringstream os;
    os << "hour " << t << " extended active set:";
    for (int k : hw.active_set) os << " " << cs_.flow_constraints[su(k)].id;
    if (hw.active_set.size() > 20)
      os << "  [warning: " << hw.active_set.size() << " rows, above the expected ~20]";
    out.report.active_set_events.push_back(os.str());
  }

  if (!out.converged) {
    out.report.failure_reason = failure.empty()
                                    ? "iteration limit reached (" + std::to_string(opts_.max_iter) + ")"
                                    : failure;
    // weak-location hints from the per-hour near-null directions
    std::string msg = out.report.failure_reason + "; feasibility " +
                      std::to_string(it.feas_error) + " p.u.";
    for (int t = 0; t < cs_.T; t++) {
      const auto& hw = it.hours[su(t)];
      if (hw.lu.n() > 0 && hw.lu.smallest_singular_estimate() < 1e-3) {
        Eigen::SparseMatrix<double> DF;
        Eigen::MatrixXd DF0;
        eval_jacobian(hw.state, cs_, hw.adm, hw.idx, DF, DF0);
        const std::string weak = "hour " + std::to_string(t) + ": " +
                                 describe_weak_rows(cs_, hw.idx, DF);
        out.report.weak_locations.push_back(weak);
        msg += "; weak " + weak;
      }
    }
    throw NonConvergence(msg);
  }

  // final snapshot for pricing and diagnostics
  const int nb = cs_.n_bids(), T = cs_.T;
  out.x = it.x;
  out.states.resize(su(T));
  out.lambda0 = it.lambda0;
  out.sigma = it.sigma;
  out.pi = it.pi;
  out.pi_lb = it.pi_lb.size() ? it.pi_lb : Eigen::MatrixXd::Zero(nb, T);
  out.pi_ub = it.pi_ub.size() ? it.pi_ub : Eigen::MatrixXd::Zero(nb, T);
  out.lambda_rows.resize(su(T));
  out.active_flow.resize(su(T));
  for (int t = 0; t < T; t++) {
    out.states[su(t)] = it.hours[su(t)].state;
    out.lambda_rows[su(t)] = it.hours[su(t)].lambda_rows;
    out.active_flow[su(t)] = it.hours[su(t)].active_set;
  }
  out.final_qp = qp;
  for (int t = 0; t < T; t++)
    for (size_t k = 0; k < cs_.flow_constraints.size(); k++)
      if (!it.relaxed.empty() && it.relaxed[su(t)][k])
        out.relaxed_rows.push_back("flow " + cs_.flow_constraints[k].id + " hour " +
                                   std::to_string(t) + " violated at the penalty price");
  out.it_labels = it_labels_;
  out.mu_it = it.mu_it.size() ? it.mu_it : Eigen::VectorXd::Zero(IT_.rows());
  out.objective = 0.0;
  for (int t = 0; t < T; t++) out.objective += internal_prices(t).dot(it.x.col(t));
  return out;
}

DispatchSolution solve_dispatch(const CaseModel& cs, const SolverOptions& opts) {
  SqpDriver driver(cs, opts);
  return driver.solve();
}

}  // namespace dispatch
