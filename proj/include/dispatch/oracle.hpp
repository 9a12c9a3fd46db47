#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dispatch/netmodel.hpp"

namespace dispatch {

// Brute-force reference optimizer, independent of the SQP path. One bid per
// island acts as the balancer: its volume is solved together with the state
// so every evaluated point satisfies all balance equations exactly. The
// remaining bid-hour coordinates are swept on a grid with zoom refinement,
// then a finite-difference Newton polish lands on the active-constraint
// manifold.
struct OracleResult {
  Eigen::MatrixXd x;        // n_bids x T, p.u.
  double cost = 0.0;        // currency
  std::vector<std::string> active;  // binding rows at the optimum
  std::vector<int> balancer_bids;   // per island
  bool polished = false;
  double grid_step = 0.0;   // final sweep resolution, p.u.
};

struct OracleOptions {
  int steps = 9;        // grid points per free coordinate and level
  int zoom_levels = 6;
  double feas_tol = 1e-8;
  double active_tol = 1e-3;  // binding detection after the sweep, p.u.
};

OracleResult oracle_solve(const CaseModel& cs, const OracleOptions& opts = {});

// Central finite difference of the oracle optimal cost over demand at one
// bus-hour; currency per MWh.
double oracle_lmp(const CaseModel& cs, int bus, int hour, double delta = 1e-3,
                  const OracleOptions& opts = {});

}  // namespace dispatch
