#pragma once

#include <string>
#include <vector>

#include "dispatch/pricing.hpp"
#include "dispatch/sqp.hpp"

namespace dispatch {

// Emits schedule.csv (bid, hour, MW), prices.csv (bus, hour, lmp, energy,
// loss, congestion; rounded to 0.01) and report.txt under out_dir. Output is
// deterministic: fixed ordering, no timestamps or timings.
void write_solution(const DispatchSolution& sol, const std::vector<NodalPrice>& prices,
                    const std::vector<UnitEconomics>& units, const CaseModel& cs,
                    const std::string& out_dir);

// Failure path: report.txt only, with the failure text and partial flags.
void write_failure_report(const std::string& reason, const CaseModel& cs,
                          const std::string& out_dir);

std::string format_report(const DispatchSolution& sol, const std::vector<UnitEconomics>& units,
                          const CaseModel& cs);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace dispatch
