#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dispatch/diagnostics.hpp"
#include "dispatch/io.hpp"
#include "dispatch/oracle.hpp"
#include "dispatch/pricing.hpp"
#include "dispatch/sqp.hpp"

using namespace dispatch;

namespace {

bool log_enabled() {
  const char* v = std::getenv("ACDISPATCH_LOG");
  return v && *v && std::string(v) != "0" && std::string(v) != "off";
}

int run_solve(const std::string& case_path, const std::string& out_dir, SolverOptions opts) {
  CaseModel cs = load_case_file(case_path);
  opts.verbose = log_enabled();
  try {
    DispatchSolution sol = solve_dispatch(cs, opts);
    auto prices = compute_lmps(sol, cs);
    auto units = marginal_profits(sol, cs);
    write_solution(sol, prices, units, cs, out_dir);
    std::cout << "converged in " << sol.report.iterations << " iterations; objective "
              << sol.objective << "; wall " << sol.report.wall_seconds << " s (parallel "
              << sol.report.parallel_seconds << " s, " << opts.workers << " workers)\n";
    std::cout << "wrote " << out_dir << "/schedule.csv, prices.csv, report.txt\n";
    return 0;
  } catch (const DispatchError& e) {
    write_failure_report(e.what(), cs, out_dir);
    std::cerr << "solve failed: " << e.what() << "\n";
    return 1;
  }
}

int run_validate(const std::string& case_path) {
  std::ifstream in(case_path);
  if (!in) {
    std::cerr << "cannot open '" << case_path << "'\n";
    return 1;
  }
  try {
    CaseModel cs = parse_case(in);
    ValidationReport rep = validate_case(cs);
    if (!rep.ok()) {
      std::cerr << "invalid case:\n" << rep.to_string();
      return 1;
    }
    std::cout << "valid: " << cs.n_buses() << " buses, " << cs.branches.size() << " branches, "
              << cs.n_bids() << " bids, T=" << cs.T << "\n";
    return 0;
  } catch (const ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "invalid case:\n" << e.what() << "\n";
    return 1;
  }
}

int run_oracle(const std::string& case_path, int steps, const std::string& lmp_spec) {
  CaseModel cs = load_case_file(case_path);
  OracleOptions opts;
  if (steps > 1) opts.steps = steps;
  if (!lmp_spec.empty()) {
    const auto comma = lmp_spec.find(',');
    if (comma == std::string::npos) {
      std::cerr << "--lmp expects bus,hour\n";
      return 2;
    }
    const std::string bus_id = lmp_spec.substr(0, comma);
    const int hour = std::stoi(lmp_spec.substr(comma + 1));
    const int bus = cs.bus_index(bus_id);
    if (bus < 0 || hour < 0 || hour >= cs.T) {
      std::cerr << "unknown bus or hour in --lmp\n";
      return 2;
    }
    const double price = oracle_lmp(cs, bus, hour, 1e-3, opts);
    std::cout << "fd price " << bus_id << " hour " << hour << ": " << price << "\n";
    return 0;
  }
  OracleResult res = oracle_solve(cs, opts);
  std::cout << "cost " << res.cost << "  (grid step " << res.grid_step << " p.u., polished "
            << (res.polished ? "yes" : "no") << ")\n";
  for (int j = 0; j < cs.n_bids(); j++)
    for (int t = 0; t < cs.T; t++)
      std::cout << "  " << cs.bids[static_cast<size_t>(j)].id << " hour " << t << ": "
                << res.x(j, t) * cs.base_mva << " MW\n";
  for (const auto& a : res.active) std::cout << "  binding: " << a << "\n";
  return 0;
}

int run_diagnose(const std::string& case_path, const std::string& sol_dir) {
  CaseModel cs = load_case_file(case_path);
  DispatchSolution sol = solve_dispatch(cs, {});

  // cross-check a prior schedule if one is present
  std::ifstream sched(sol_dir + "/schedule.csv");
  if (sched) {
    std::string line;
    std::getline(sched, line);  // header
    double drift = 0.0;
    while (std::getline(sched, line)) {
      const auto c1 = line.find(','), c2 = line.rfind(',');
      if (c1 == std::string::npos || c2 == c1) continue;
      const std::string id = line.substr(0, c1);
      const int hour = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
      const double mw = std::stod(line.substr(c2 + 1));
      for (int j = 0; j < cs.n_bids(); j++)
        if (cs.bids[static_cast<size_t>(j)].id == id)
          drift = std::max(drift, std::abs(mw - sol.x(j, hour) * cs.base_mva));
    }
    if (drift > 0.1)
      std::cerr << "warning: stored schedule deviates from re-solved dispatch by " << drift
                << " MW\n";
  }

  RegularityReport rep = run_diagnostics(sol, cs);
  const std::string text = format_regularity_report(rep, cs);
  write_text_file(sol_dir + "/regularity.txt", text);
  std::cout << text;
  std::cout << "wrote " << sol_dir << "/regularity.txt\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AC-based economic dispatch"};
  app.require_subcommand(1);

  std::string case_path, out_dir = "out", sol_dir, lmp_spec;
  int steps = 0;
  SolverOptions opts;

  CLI::App* solve = app.add_subcommand("solve", "clear the market for a case");
  solve->add_option("--case", case_path, "case file")->required();
  solve->add_option("--out", out_dir, "output directory");
  solve->add_option("--tol-feas", opts.tol_feas, "feasibility tolerance, p.u.");
  solve->add_option("--tol-opt", opts.tol_opt, "optimality tolerance, currency/MWh");
  solve->add_option("--max-iter", opts.max_iter, "iteration limit");
  solve->add_option("--workers", opts.workers, "parallel hour workers");

  CLI::App* validate = app.add_subcommand("validate", "check a case file");
  validate->add_option("--case", case_path, "case file")->required();

  CLI::App* oracle = app.add_subcommand("oracle", "brute-force reference solve");
  oracle->add_option("--case", case_path, "case file")->required();
  oracle->add_option("--steps", steps, "grid points per coordinate");
  oracle->add_option("--lmp", lmp_spec, "finite-difference price at bus,hour");

  CLI::App* diagnose = app.add_subcommand("diagnose", "regularity checks at the solution");
  diagnose->add_option("--case", case_path, "case file")->required();
  diagnose->add_option("--solution", sol_dir, "solution directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (solve->parsed()) return run_solve(case_path, out_dir, opts);
    if (validate->parsed()) return run_validate(case_path);
    if (oracle->parsed()) return run_oracle(case_path, steps, lmp_spec);
    if (diagnose->parsed()) return run_diagnose(case_path, sol_dir);
  } catch (const ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const DispatchError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 2;
}
