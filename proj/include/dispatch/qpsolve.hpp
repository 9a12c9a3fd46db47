#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "dispatch/errors.hpp"
#include "dispatch/reduction.hpp"

namespace dispatch {

// Generic dense convex QP:
//   min 1/2 z'Hz + c'z
//   s.t. Aeq z = beq,  Ain z <= bin,  lb <= z <= ub
// H must be positive definite (the reduced blocks are after projection).
struct DenseQP {
  Eigen::MatrixXd H;
  Eigen::VectorXd c;
  Eigen::MatrixXd Aeq;
  Eigen::VectorXd beq;
  Eigen::MatrixXd Ain;
  Eigen::VectorXd bin;
  Eigen::VectorXd lb, ub;
  std::vector<std::string> eq_labels, in_labels;
};

// Stationarity convention: Hz + c + Aeq'y + Ain'mu + pi_ub - pi_lb = 0,
// mu, pi_lb, pi_ub >= 0 with exact complementarity.
struct DenseQPResult {
  Eigen::VectorXd z;
  Eigen::VectorXd y_eq;
  Eigen::VectorXd mu;
  Eigen::VectorXd pi_lb, pi_ub;
  int iterations = 0;
};

// Dual active-set method (start at the unconstrained minimum, add violated
// constraints one at a time), then a direct KKT re-solve on the final active
// set to restore full precision. Most-violated selection with index
// tie-breaking keeps the path deterministic.
DenseQPResult solve_dense_qp(const DenseQP& qp);

// Hour-coupled reduced subproblem. Variables are bid-volume steps flattened
// hour-major: index(t, j) = t * n_bids + j.
struct ReducedQP {
  int T = 0;
  int n_bids = 0;
  std::vector<ReducedBlocks> hours;
  std::vector<std::vector<int>> s_rows;  // per hour: flow-constraint index per S row
  Eigen::SparseMatrix<double> IT;        // intertemporal rows (ramps, energy groups)
  Eigen::VectorXd r_it;
  std::vector<std::string> it_labels;
  Eigen::VectorXd dlb, dub;              // step bounds (lb - x, ub - x)
  double elastic_penalty = 0.0;          // >0 enables flow-row relaxation on infeasibility
  int vars() const { return T * n_bids; }
};

struct QPSolution {
  Eigen::VectorXd dx;                      // flattened step
  std::vector<Eigen::VectorXd> lambda0;    // per hour: island equality duals
  std::vector<Eigen::VectorXd> sigma;      // per hour: flow-row duals >= 0
  Eigen::VectorXd mu_it;                   // >= 0
  Eigen::VectorXd pi;                      // aggregate bound/intertemporal dual per bid-hour
  Eigen::VectorXd pi_lb, pi_ub;            // box duals >= 0
  bool relaxed = false;
  std::vector<std::string> relaxed_rows;
  struct RelaxedFlow {
    int hour, constraint;
    double amount;  // p.u. violation bought at the penalty price
  };
  std::vector<RelaxedFlow> relaxed_flow;
  int iterations = 0;
};

QPSolution solve_qp(const ReducedQP& qp);

// Infinity norm over stationarity, primal/dual feasibility and
// complementarity violations.
double kkt_residual(const ReducedQP& qp, const QPSolution& sol);

}  // namespace dispatch
