#pragma once

#include <memory>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "dispatch/acpf.hpp"
#include "dispatch/netmodel.hpp"

namespace dispatch {

// Sparse LU of the power-flow Jacobian. The symbolic analysis is reused
// across factorizations as long as the sparsity pattern is unchanged
// (i.e. until PV-PQ switching alters the structure).
class LuHandle {
 public:
  LuHandle() = default;

  // Throws NumericallySingular when the factorization fails or the smallest
  // singular value falls below 1e-12 of the largest matrix entry; this is
  // the solvability-boundary signal.
  static LuHandle factorize(const Eigen::SparseMatrix<double>& DF, const LuHandle* prior = nullptr);

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;            // DF z = rhs
  Eigen::VectorXd solve_transpose(const Eigen::VectorXd& rhs) const;  // DF^T z = rhs

  int n() const { return n_; }
  uint64_t pattern_signature() const { return pattern_sig_; }
  double smallest_singular_estimate() const { return sigma_min_; }
  const Eigen::VectorXd& near_null_vector() const { return near_null_; }
  long solve_count() const { return counter_ ? *counter_ : 0; }

 private:
  std::shared_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> lu_;
  std::shared_ptr<long> counter_;
  uint64_t pattern_sig_ = 0;
  int n_ = 0;
  double sigma_min_ = kInf;
  Eigen::VectorXd near_null_;
};

// Per-hour reduced subproblem blocks over bid volumes.
//   L0 dx = rL          swing balance rows, one per island
//   S  dx <= rS         extended-active-set flow rows
// c_tilde and H_red come from substituting the state elimination into the
// quadratic model; H_plus is the PSD projection of H_red.
struct ReducedBlocks {
  Eigen::MatrixXd L0;
  Eigen::VectorXd rL;
  Eigen::MatrixXd S;
  Eigen::VectorXd rS;
  Eigen::VectorXd c_tilde;
  Eigen::MatrixXd H_red;
  Eigen::MatrixXd H_plus;
};

// L0 = B0 - DF0 DF^-1 B and S = DG DF^-1 B, assembled by one adjoint solve
// per row; bid columns for bids sharing a bus are identical by construction.
void reduced_gradients(const LuHandle& lu, const CaseModel& cs, const IncidenceMap& inc,
                       const StateIndex& idx, const Eigen::MatrixXd& DF0,
                       const Eigen::MatrixXd& DG_active, Eigen::MatrixXd& L0, Eigen::MatrixXd& S);

// B^T DF^-T H DF^-1 B with one forward solve per dedup group. Callers that
// already hold the solved group columns (n_free x n_groups) pass them to
// skip the solves.
Eigen::MatrixXd reduced_hessian(const LuHandle& lu, const CaseModel& cs, const IncidenceMap& inc,
                                const StateIndex& idx, const Eigen::SparseMatrix<double>& H,
                                const Eigen::MatrixXd* group_cols = nullptr);

// Eigenvalue clipping from below at eps = 1e-8 * max(1, lambda_max).
Eigen::MatrixXd psd_project(const Eigen::MatrixXd& H_red);

// c + B^T DF^-T H DF^-1 rF (exact substitution of the state correction
// into the quadratic term; equals c when rF = 0 or H = 0).
Eigen::VectorXd reduced_cost(const Eigen::VectorXd& c, const Eigen::VectorXd& rF,
                             const LuHandle& lu, const CaseModel& cs, const IncidenceMap& inc,
                             const StateIndex& idx, const Eigen::SparseMatrix<double>& H);

}  // namespace dispatch
