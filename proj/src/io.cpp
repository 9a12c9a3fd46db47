#include "dispatch/io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dispatch {

namespace {

size_t su(int i) { return static_cast<size_t>(i); }

std::string money(double v) {
  // round half away from zero to 0.01, then fixed two decimals
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", std::round(v * 100.0) / 100.0);
  // avoid "-0.00"
  if (std::string(buf) == "-0.00") return "0.00";
  return buf;
}

std::string mw(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  if (std::string(buf) == "-0.0000") return "0.0000";
  return buf;
}

}  // namespace

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::string format_report(const DispatchSolution& sol, const std::vector<UnitEconomics>& units,
                          const CaseModel& cs) {
  std::ostringstream os;
  const ConvergenceReport& rep = sol.report;
  os << "status: " << (rep.converged ? "converged" : "failed") << "\n";
  os << "iterations: " << rep.iterations << "\n";
  os << "feasibility_error_pu: " << rep.final_feas << "\n";
  os << "stationarity_error: " << rep.final_opt << "\n";
  os << "equilibrium_residual: " << rep.final_eq21 << "\n";
  os << "objective: " << money(sol.objective) << "\n";
  os << "\niteration log (iter phase alpha feas_before feas_after opt_norm eq21 active_rows)\n";
  for (const IterationLog& l : rep.log) {
    os << "  " << l.iter << " " << l.phase << " " << l.alpha << " " << l.feas_before << " "
       << l.feas_after << " " << l.opt_norm << " " << l.eq21_resid << " " << l.active_rows
       << "\n";
  }
  os << "\nextended active sets\n";
  for (const auto& e : rep.active_set_events) os << "  " << e << "\n";
  os << "\nbinding constraints (shadow prices, currency/MWh)\n";
  bool any_binding = false;
  for (int t = 0; t < cs.T; t++) {
    for (int r = 0; r < sol.sigma[su(t)].size(); r++) {
      const double sig = sol.sigma[su(t)](r) / cs.base_mva;
      if (sig <= 1e-9) continue;
      os << "  flow " << cs.flow_constraints[su(sol.active_flow[su(t)][su(r)])].id << " hour "
         << t << " sigma " << money(sig) << "\n";
      any_binding = true;
    }
  }
  for (int r = 0; r < sol.mu_it.size(); r++) {
    const double mu = sol.mu_it(r) / cs.base_mva;
    if (mu <= 1e-9) continue;
    os << "  " << sol.it_labels[su(r)] << " mu " << money(mu) << "\n";
    any_binding = true;
  }
  if (!any_binding) os << "  none\n";
  os << "\npv-pq switches\n";
  if (rep.pv_pq_events.empty()) os << "  none\n";
  for (const auto& e : rep.pv_pq_events) os << "  " << e << "\n";
  if (!sol.relaxed_rows.empty()) {
    os << "\nrelaxed constraints (schedule violates these at the penalty price)\n";
    for (const auto& e : sol.relaxed_rows) os << "  " << e << "\n";
  }
  if (!rep.weak_locations.empty()) {
    os << "\nweak locations\n";
    for (const auto& e : rep.weak_locations) os << "  " << e << "\n";
  }
  os << "\nunit economics (bid hour mw price pi position)\n";
  for (const UnitEconomics& u : units) {
    const Bid& bid = cs.bids[su(u.bid)];
    os << "  " << bid.id << " " << u.hour << " " << mw(sol.x(u.bid, u.hour) * cs.base_mva) << " "
       << money(bid.price[su(u.hour)]) << " " << money(u.pi) << " " << to_string(u.position)
       << "\n";
  }
  return os.str();
}

void write_solution(const DispatchSolution& sol, const std::vector<NodalPrice>& prices,
                    const std::vector<UnitEconomics>& units, const CaseModel& cs,
                    const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);

  std::ostringstream sched;
  sched << "bid,hour,mw\n";
  for (int j = 0; j < cs.n_bids(); j++)
    for (int t = 0; t < cs.T; t++)
      sched << cs.bids[su(j)].id << "," << t << "," << mw(sol.x(j, t) * cs.base_mva) << "\n";
  write_text_file(out_dir + "/schedule.csv", sched.str());

  std::ostringstream pr;
  pr << "bus,hour,lmp,energy,loss,congestion\n";
  for (const NodalPrice& p : prices)
    pr << cs.buses[su(p.bus)].id << "," << p.hour << "," << money(p.lmp) << "," << money(p.energy)
       << "," << money(p.loss) << "," << money(p.congestion) << "\n";
  write_text_file(out_dir + "/prices.csv", pr.str());

  write_text_file(out_dir + "/report.txt", format_report(sol, units, cs));
}

void write_failure_report(const std::string& reason, const CaseModel& cs,
                          const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ostringstream os;
  os << "status: failed\n";
  os << "partial_outputs: none\n";
  os << "case: " << (cs.name.empty() ? "unnamed" : cs.name) << "\n";
  os << "reason: " << reason << "\n";
  write_text_file(out_dir + "/report.txt", os.str());
}

}  // namespace dispatch
