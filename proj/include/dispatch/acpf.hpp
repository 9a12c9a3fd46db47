#pragma once

#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "dispatch/netmodel.hpp"

namespace dispatch {

// Per-hour electrical state. Swing buses keep theta = 0 and V = v_set;
// PV-typed buses keep V = v_set. A PV bus that hit a reactive limit is
// retyped PQ with its generation pinned at that limit.
struct SystemState {
  int hour = 0;
  Eigen::VectorXd theta;        // per bus, radians
  Eigen::VectorXd vm;           // per bus, p.u.
  std::vector<BusKind> kind;    // effective typing
  std::vector<int8_t> pinned;   // 0 none, +1 at q_max, -1 at q_min
  Eigen::VectorXd q_pin;        // pinned reactive generation, p.u.
};

SystemState flat_state(const CaseModel& cs, int hour);

// Free-variable and residual-row numbering for one (case, typing) pair.
// Variables: angles of non-swing buses, then magnitudes of PQ-typed buses.
// Rows: P balance of non-swing buses, then Q balance of PQ-typed buses.
struct StateIndex {
  std::vector<int> ang_of_bus;  // -1 if fixed
  std::vector<int> vm_of_bus;   // -1 if fixed
  std::vector<int> p_row_of_bus;  // -1 at swing
  std::vector<int> q_row_of_bus;  // -1 unless PQ-typed
  int n_free = 0;
  uint64_t typing_signature = 0;

  static StateIndex build(const CaseModel& cs, const SystemState& st);
};

struct BalanceResidual {
  Eigen::VectorXd rows;   // length n_free, P rows then Q rows
  Eigen::VectorXd swing;  // per island: swing active-power residual
  double inf_norm() const;
};

// Residual convention: row_i = F_i(y) + load_i - (B x)_i, where F is the
// calculated injection from bus i into the network. The swing reactive
// balance is slack and carries no row.
BalanceResidual eval_balance(const SystemState& st, const CaseModel& cs,
                             const AdmittanceStructure& adm,
                             const Eigen::VectorXd& x_hour);

// DF over free variables plus dense swing rows DF0 (one per island).
void eval_jacobian(const SystemState& st, const CaseModel& cs,
                   const AdmittanceStructure& adm, const StateIndex& idx,
                   Eigen::SparseMatrix<double>& DF, Eigen::MatrixXd& DF0);

// Calculated injections at every bus (diagnostic/loss helper).
void bus_injections(const SystemState& st, const CaseModel& cs,
                    const AdmittanceStructure& adm, Eigen::VectorXd& p,
                    Eigen::VectorXd& q);

struct NewtonOptions {
  double tol = 1e-8;
  int max_iter = 50;
  bool pv_pq_switching = true;
};

// Solves the non-swing balance equations at fixed bid volumes x.
// Throws NonConvergence / SingularJacobian.
SystemState newton_power_flow(const CaseModel& cs, int hour, const Eigen::VectorXd& x,
                              const SystemState& start, const NewtonOptions& opts = {});

// Applies the reactive-limit typing rules once; returns number of changes.
// Switch-back uses a 1e-4 p.u. voltage hysteresis around v_set.
int pv_pq_switch(SystemState& st, const CaseModel& cs, const AdmittanceStructure& adm);

struct FlowEval {
  Eigen::VectorXd value;  // per constraint, p.u.
  Eigen::MatrixXd grad;   // rows: constraints, cols: free variables
};

// Directed sums of branch active-power flows at the sending end.
FlowEval eval_flow_constraints(const SystemState& st, const CaseModel& cs,
                               const AdmittanceStructure& adm, const StateIndex& idx,
                               const std::vector<int>& subset, bool with_grad = true);

struct LossGradients {
  double loss = 0.0;           // total active loss, p.u.
  Eigen::VectorXd dl_dxa;      // per bus: dLoss / d(active injection)
  Eigen::VectorXd dl_dxr;      // per bus: dLoss / d(reactive injection)
};

// Gradients by one adjoint solve against DF^T; requires a solved state.
class LuHandle;
LossGradients loss_and_gradients(const SystemState& st, const CaseModel& cs,
                                 const AdmittanceStructure& adm, const StateIndex& idx,
                                 LuHandle& lu);

double total_loss(const SystemState& st, const CaseModel& cs, const AdmittanceStructure& adm);

// Multipliers defining the Lagrangian Hessian H = sum(lambda_i * hess F_i)
// + sum(lambda0 * hess F0) + sum(sigma_k * hess G_k).
struct HessianWeights {
  Eigen::VectorXd lambda_rows;     // per DF row
  Eigen::VectorXd lambda0;         // per island
  Eigen::VectorXd sigma;           // per entry of flow_subset
  std::vector<int> flow_subset;    // indices into case flow_constraints
};

Eigen::SparseMatrix<double> constraint_hessian(const SystemState& st, const CaseModel& cs,
                                               const AdmittanceStructure& adm,
                                               const StateIndex& idx,
                                               const HessianWeights& w);

// Gradient of the total active loss over free variables.
Eigen::VectorXd loss_gradient_y(const SystemState& st, const CaseModel& cs,
                                const AdmittanceStructure& adm, const StateIndex& idx);

}  // namespace dispatch
