#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dispatch/qpsolve.hpp"

namespace dispatch {

struct SolverOptions {
  double tol_feas = 1e-6;  // p.u. power
  double tol_opt = 0.01;   // currency/MWh
  int max_iter = 50;
  int workers = 1;
  double elastic_penalty = 1e6;  // currency/MWh, subproblem relaxation price
  bool verbose = false;
};

struct IterationLog {
  int iter = 0;
  int phase = 0;
  double alpha = 0.0;
  double feas_before = 0.0, feas_after = 0.0;
  double opt_norm = 0.0;    // ||H+ dx||inf, currency/MWh
  double eq21_resid = 0.0;  // equilibrium residual, currency/MWh
  double merit_before = 0.0, merit_after = 0.0;  // phase 2
  int active_rows = 0;
  int pv_pq_changes = 0;
};

struct ConvergenceReport {
  bool converged = false;
  int iterations = 0;
  double final_feas = 0.0;
  double final_opt = 0.0;
  double final_eq21 = 0.0;
  std::vector<IterationLog> log;
  std::vector<std::string> pv_pq_events;
  std::vector<std::string> active_set_events;
  std::vector<std::string> weak_locations;
  std::string failure_reason;
  double wall_seconds = 0.0;
  double parallel_seconds = 0.0;
  int workers = 1;
};

// Per-hour working data carried across iterations.
struct HourWork {
  SystemState state;
  AdmittanceStructure adm;
  StateIndex idx;
  LuHandle lu;
  BalanceResidual res;
  Eigen::VectorXd flow_values;       // all flow constraints
  std::vector<int> active_set;       // extended active set, insertion order
  Eigen::VectorXd lambda_rows;       // nodal multipliers per DF row, internal units
  Eigen::VectorXd y0;                // DF^-1 rF at the current iterate
  Eigen::MatrixXd group_cols;        // DF^-1 B per dedup group
  bool typing_frozen = false;
};

struct Iterate {
  Eigen::MatrixXd x;                     // n_bids x T, p.u.
  std::vector<HourWork> hours;
  std::vector<Eigen::VectorXd> lambda0;  // per hour, per island (internal units)
  std::vector<Eigen::VectorXd> sigma;    // per hour, aligned with active_set
  Eigen::MatrixXd pi;                    // n_bids x T (internal units)
  Eigen::MatrixXd pi_lb, pi_ub;          // split bound duals
  Eigen::VectorXd mu_it;                 // intertemporal-row duals
  std::vector<std::vector<char>> relaxed;  // per hour, per flow constraint
  int iter = 0;
  double feas_error = kInf;     // p.u.
  double last_opt_norm = kInf;  // internal units
  double last_eq21 = kInf;      // internal units
};

enum class ConvergenceStatus { Converged, Iterate, Failed };

struct DispatchSolution {
  bool converged = false;
  Eigen::MatrixXd x;                     // n_bids x T, p.u.
  std::vector<SystemState> states;
  std::vector<Eigen::VectorXd> lambda0;      // internal units (currency per p.u.)
  std::vector<Eigen::VectorXd> lambda_rows;  // per hour, per DF row
  std::vector<std::vector<int>> active_flow; // extended active set per hour
  std::vector<Eigen::VectorXd> sigma;        // aligned with active_flow
  Eigen::MatrixXd pi;                        // internal units
  Eigen::MatrixXd pi_lb, pi_ub;              // split bound duals
  Eigen::VectorXd mu_it;
  std::vector<std::string> it_labels;
  ReducedQP final_qp;  // blocks assembled at the solution state
  std::vector<std::string> relaxed_rows;  // violations bought at the penalty
  ConvergenceReport report;
  double base_mva = 100.0;
  double objective = 0.0;  // currency
};

// The SQP driver. Hour-level evaluation and reduction run in parallel over
// an immutable iterate snapshot; the QP solve and updates are sequential.
class SqpDriver {
 public:
  SqpDriver(const CaseModel& cs, const SolverOptions& opts);

  Iterate flat_start_iterate() const;
  // Adds rows with G >= limit - band; never removes rows.
  void manage_active_set(Iterate& it) const;
  // Jacobians, factorization, nodal multipliers, reduced blocks, IT rows.
  ReducedQP assemble_subproblem(Iterate& it) const;
  // Two-phase backtracking step; fills the trial states for the winner.
  double line_search(Iterate& it, const QPSolution& sol,
                     std::vector<SystemState>& best_states, int* phase_out = nullptr,
                     double* merit_before = nullptr, double* merit_after = nullptr) const;
  void update_iterate(Iterate& it, double alpha, const QPSolution& sol,
                      const std::vector<SystemState>& new_states,
                      std::vector<std::string>* pv_events = nullptr) const;
  ConvergenceStatus check_convergence(const Iterate& it) const;

  DispatchSolution solve();

  const CaseModel& case_model() const { return cs_; }
  const IncidenceMap& incidence() const { return inc_; }
  double price_scale() const { return cs_.base_mva; }
  double tol_opt_internal() const { return opts_.tol_opt * cs_.base_mva; }
  const Eigen::SparseMatrix<double>& it_rows() const { return IT_; }
  const Eigen::VectorXd& it_bounds() const { return b_it_; }
  const std::vector<std::string>& it_labels() const { return it_labels_; }
  double parallel_seconds() const { return parallel_seconds_; }

  // feasibility of the current states/volumes: balance, flow, intertemporal
  double feasibility_error(const Iterate& it) const;
  // power-balance rows only (drives the two-phase step rule)
  double balance_error(const Iterate& it) const;
  // worst flow / intertemporal violation (excludes balance rows)
  double constraint_violation(const Iterate& it) const;
  // re-evaluate per-hour residuals and flow values at the current iterate
  void refresh_residuals(Iterate& it) const;
  double equilibrium_residual(const Iterate& it, const ReducedQP& qp) const;

 private:
  void eval_hour(Iterate& it, int t) const;
  void reduce_hour(Iterate& it, int t, ReducedQP& qp) const;
  void parallel_hours(const std::function<void(int)>& fn) const;
  void parallel_tasks(int count, const std::function<void(int)>& fn) const;
  Eigen::VectorXd internal_prices(int t) const;

  CaseModel cs_;
  SolverOptions opts_;
  IncidenceMap inc_;
  std::vector<AdmittanceStructure> adms_;
  Eigen::SparseMatrix<double> IT_;
  Eigen::VectorXd b_it_;
  std::vector<std::string> it_labels_;
  double lambda0_proxy_ = 0.0;
  mutable double parallel_seconds_ = 0.0;
};

DispatchSolution solve_dispatch(const CaseModel& cs, const SolverOptions& opts = {});

}  // namespace dispatch
