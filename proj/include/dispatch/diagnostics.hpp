#pragma once

#include <string>
#include <vector>

#include "dispatch/sqp.hpp"

namespace dispatch {

// Stacked gradients (over bid-hour variables) of every constraint active at
// the solution, with row provenance: nonlinear-origin rows are the reduced
// balance equalities and flow rows; linear rows are intertemporal
// constraints and variable bounds.
struct ActiveGradients {
  Eigen::MatrixXd rows;
  std::vector<std::string> labels;
  std::vector<bool> nonlinear;
  std::vector<bool> equality;
  std::vector<double> duals;  // currency/MWh
};

ActiveGradients active_constraint_gradients(const DispatchSolution& sol, const CaseModel& cs,
                                            double tol_active = 1e-6);

struct RankReport {
  int rows = 0;
  int rank = 0;
  int deficiency = 0;
  bool holds = false;
};

RankReport check_licq(const Eigen::MatrixXd& gradients);

struct MfcqResult {
  bool holds = false;
  bool equalities_independent = false;
  bool strict_point_exists = false;
  Eigen::VectorXd direction;  // certificate when it exists
  std::string detail;
};

MfcqResult check_mfcq(const DispatchSolution& sol, const CaseModel& cs);

struct ComplementarityReport {
  std::vector<std::string> degenerate_rows;            // active rows with ~zero dual
  std::vector<std::string> degenerate_nonlinear_rows;  // subset with nonlinear origin
  bool holds_all = false;
  bool holds_nonlinear = false;
};

ComplementarityReport check_strict_complementarity(const DispatchSolution& sol,
                                                   const CaseModel& cs, double tol = 0.01);

struct UniquenessVerdict {
  bool nonlinear_gradients_independent = false;
  bool duals_unique = false;   // trivial null space in (lambda0, sigma)
  bool prices_unique = false;  // null directions leave every bus price fixed
  std::string detail;
};

UniquenessVerdict nodal_price_uniqueness(const DispatchSolution& sol, const CaseModel& cs);

// Smallest eigenvalue per hour of the Lagrangian Hessian at flat start with
// uniform unit multipliers on the active-power rows.
std::vector<double> check_flat_start_convexity(const CaseModel& cs);

struct RegularityReport {
  RankReport licq;
  MfcqResult mfcq;
  ComplementarityReport complementarity;
  UniquenessVerdict uniqueness;
  std::vector<double> flat_start_min_eig;
  std::vector<std::string> weak_locations;
};

RegularityReport run_diagnostics(const DispatchSolution& sol, const CaseModel& cs);

std::string format_regularity_report(const RegularityReport& rep, const CaseModel& cs);

}  // namespace dispatch
