#pragma once

#include <vector>

#include "dispatch/sqp.hpp"

namespace dispatch {

// Market-facing outputs; all currency figures are per MWh.
struct NodalPrice {
  int bus = 0;
  int hour = 0;
  double lmp = 0.0;
  double energy = 0.0;      // island system price (lambda0)
  double loss = 0.0;        // lambda0 * (L0 - 1)
  double congestion = 0.0;  // -(S' sigma)
};

enum class UnitPosition { at_lb, at_ub, interior, ramp_bound, energy_bound };

struct UnitEconomics {
  int bid = 0;
  int hour = 0;
  double pi = 0.0;  // locational value minus bid price
  UnitPosition position = UnitPosition::interior;
};

struct EquilibriumEntry {
  int bid = 0;
  int hour = 0;
  double violation = 0.0;  // signed complementarity violation
};

struct EquilibriumReport {
  double max_violation = 0.0;
  bool passed = false;
  std::vector<EquilibriumEntry> entries;
};

std::vector<NodalPrice> compute_lmps(const DispatchSolution& sol, const CaseModel& cs);
std::vector<UnitEconomics> marginal_profits(const DispatchSolution& sol, const CaseModel& cs);
EquilibriumReport equilibrium_check(const DispatchSolution& sol, const CaseModel& cs, double tol);

const char* to_string(UnitPosition p);

}  // namespace dispatch
