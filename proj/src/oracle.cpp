#include "dispatch/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include <Eigen/Dense>

#include "dispatch/acpf.hpp"

namespace dispatch {

namespace {

size_t su(int i) { return static_cast<size_t>(i); }

// Newton on the augmented system: non-swing balance rows plus one swing row
// per island, unknowns = free state variables plus one balancer volume per
// island. PV-PQ typing is applied between passes.
struct BalancedFlow {
  SystemState state;
  Eigen::VectorXd x_full;  // all bids at this hour
  bool ok = false;
};

BalancedFlow solve_balanced(const CaseModel& cs, const AdmittanceStructure& adm, int hour,
                            const Eigen::VectorXd& x_fixed, const std::vector<int>& balancers,
                            const SystemState& start) {
  BalancedFlow out;
  out.state = start;
  out.state.hour = hour;
  out.x_full = x_fixed;
  const int ni = cs.n_islands();

  for (int outer = 0; outer < 8; outer++) {
    StateIndex idx = StateIndex::build(cs, out.state);
    const int n = idx.n_free + ni;
    bool converged = false;
    for (int it = 0; it < 40; it++) {
      BalanceResidual res = eval_balance(out.state, cs, adm, out.x_full);
      Eigen::VectorXd r(n);
      r.head(idx.n_free) = res.rows;
      r.tail(ni) = res.swing;
      if (r.cwiseAbs().maxCoeff() <= 1e-10) {
        converged = true;
        break;
      }
      Eigen::SparseMatrix<double> DF;
      Eigen::MatrixXd DF0;
      eval_jacobian(out.state, cs, adm, idx, DF, DF0);
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
      J.topLeftCorner(idx.n_free, idx.n_free) = DF;
      J.block(idx.n_free, 0, ni, idx.n_free) = DF0;
      for (int isl = 0; isl < ni; isl++) {
        const int bus = cs.bids[su(balancers[su(isl)])].bus;
        const int prow = idx.p_row_of_bus[su(bus)];
        if (prow >= 0)
          J(prow, idx.n_free + isl) = -1.0;
        else
          J(idx.n_free + cs.island_of_bus(bus), idx.n_free + isl) = -1.0;
      }
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
      Eigen::VectorXd dv = lu.solve(-r);
      if (!dv.allFinite()) return out;
      double scale = 1.0;
      const double mx = dv.size() ? dv.cwiseAbs().maxCoeff() : 0.0;
      if (mx > 1.0) scale = 1.0 / mx;
      for (int i = 0; i < cs.n_buses(); i++) {
        if (idx.ang_of_bus[su(i)] >= 0) out.state.theta(i) += scale * dv(idx.ang_of_bus[su(i)]);
        if (idx.vm_of_bus[su(i)] >= 0)
          out.state.vm(i) = std::max(0.05, out.state.vm(i) + scale * dv(idx.vm_of_bus[su(i)]));
      }
      for (int isl = 0; isl < ni; isl++)
        out.x_full(balancers[su(isl)]) += scale * dv(idx.n_free + isl);
    }
    if (!converged) return out;
    if (pv_pq_switch(out.state, cs, adm) == 0) {
      out.ok = true;
      return out;
    }
  }
  return out;
}

struct GridContext {
  const CaseModel& cs;
  std::vector<AdmittanceStructure> adms;
  std::vector<int> balancers;              // per island
  std::vector<std::pair<int, int>> coords; // free (bid, hour) pairs
  OracleOptions opts;
};

// linear constraint screening on a complete volume matrix
bool linear_feasible(const CaseModel& cs, const Eigen::MatrixXd& x, double tol) {
  for (int j = 0; j < cs.n_bids(); j++) {
    const Bid& bid = cs.bids[su(j)];
    double prev = bid.p_initial;
    for (int t = 0; t < cs.T; t++) {
      if (x(j, t) < bid.lb[su(t)] - tol || x(j, t) > bid.ub[su(t)] + tol) return false;
      if (std::isfinite(bid.ramp_up) && x(j, t) - prev > bid.ramp_up + tol) return false;
      if (std::isfinite(bid.ramp_down) && prev - x(j, t) > bid.ramp_down + tol) return false;
      prev = x(j, t);
    }
  }
  for (const EnergyGroup& g : cs.energy_groups) {
    double sum = 0.0;
    for (int t = 0; t < cs.T; t++)
      for (int j : g.members) sum += x(j, t);
    if (sum < g.e_min - tol || sum > g.e_max + tol) return false;
  }
  return true;
}

struct Evaluation {
  bool solved = false;    // every hour's balanced flow converged
  bool feasible = false;  // solved and all constraints hold
  double cost = kInf;
  Eigen::MatrixXd x;  // with balancer volumes filled in
  std::vector<SystemState> states;
};

Evaluation evaluate_point(GridContext& ctx, const Eigen::MatrixXd& x_guess,
                          std::vector<SystemState>* warm) {
  const CaseModel& cs = ctx.cs;
  Evaluation ev;
  ev.x = x_guess;
  ev.states.resize(su(cs.T));
  for (int t = 0; t < cs.T; t++) {
    SystemState start = warm && (*warm)[su(t)].theta.size() ? (*warm)[su(t)] : flat_state(cs, t);
    start.hour = t;
    BalancedFlow bf =
        solve_balanced(cs, ctx.adms[su(t)], t, ev.x.col(t), ctx.balancers, start);
    if (!bf.ok) return ev;
    ev.x.col(t) = bf.x_full;
    ev.states[su(t)] = bf.state;
    if (warm) (*warm)[su(t)] = bf.state;
  }
  ev.solved = true;
  if (!linear_feasible(cs, ev.x, ctx.opts.feas_tol)) return ev;
  for (int t = 0; t < cs.T; t++) {
    StateIndex idx = StateIndex::build(cs, ev.states[su(t)]);
    std::vector<int> all(cs.flow_constraints.size());
    for (size_t k = 0; k < all.size(); k++) all[k] = static_cast<int>(k);
    Eigen::VectorXd G =
        eval_flow_constraints(ev.states[su(t)], cs, ctx.adms[su(t)], idx, all, false).value;
    for (int k = 0; k < G.size(); k++)
      if (G(k) > cs.flow_constraints[su(k)].limit[su(t)] + ctx.opts.feas_tol) return ev;
  }
  ev.feasible = true;
  ev.cost = 0.0;
  for (int t = 0; t < cs.T; t++)
    for (int j = 0; j < cs.n_bids(); j++)
      ev.cost += cs.bids[su(j)].price[su(t)] * cs.base_mva * ev.x(j, t);
  return ev;
}

bool lex_less(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  for (int t = 0; t < a.cols(); t++)
    for (int j = 0; j < a.rows(); j++) {
      if (a(j, t) < b(j, t) - 1e-12) return true;
      if (a(j, t) > b(j, t) + 1e-12) return false;
    }
  return false;
}

}  // namespace

OracleResult oracle_solve(const CaseModel& cs, const OracleOptions& opts) {
  if (cs.n_buses() > 4 || cs.T > 3)
    throw GridTooLarge("oracle limited to cases with <= 4 buses and T <= 3");

  GridContext ctx{cs, {}, {}, {}, opts};
  for (int t = 0; t < cs.T; t++) ctx.adms.push_back(build_admittance(cs, t));

  // balancer per island: widest total volume range, lowest bid id on ties
  ctx.balancers.assign(su(cs.n_islands()), -1);
  std::vector<double> best_range(su(cs.n_islands()), -1.0);
  for (int j = 0; j < cs.n_bids(); j++) {
    const Bid& bid = cs.bids[su(j)];
    const int isl = cs.island_of_bus(bid.bus);
    double range = 0.0;
    for (int t = 0; t < cs.T; t++) range += bid.ub[su(t)] - bid.lb[su(t)];
    if (range > best_range[su(isl)] + 1e-12) {
      best_range[su(isl)] = range;
      ctx.balancers[su(isl)] = j;
    }
  }
  for (int isl = 0; isl < cs.n_islands(); isl++)
    if (ctx.balancers[su(isl)] < 0)
      throw NoFeasiblePoint("island " + std::to_string(cs.island_ids[su(isl)]) + " has no bids");

  for (int j = 0; j < cs.n_bids(); j++) {
    if (std::find(ctx.balancers.begin(), ctx.balancers.end(), j) != ctx.balancers.end()) continue;
    for (int t = 0; t < cs.T; t++) ctx.coords.emplace_back(j, t);
  }
  const int dim = static_cast<int>(ctx.coords.size());
  double total = 1.0;
  for (int d = 0; d < dim; d++) total *= opts.steps;
  if (total > 1e7) throw GridTooLarge("grid of " + std::to_string(total) + " points exceeds 1e7");

  // sweep windows start at the full boxes
  std::vector<double> lo(su(dim)), hi(su(dim));
  for (int d = 0; d < dim; d++) {
    const auto [j, t] = ctx.coords[su(d)];
    lo[su(d)] = cs.bids[su(j)].lb[su(t)];
    hi[su(d)] = cs.bids[su(j)].ub[su(t)];
  }

  Evaluation incumbent;
  double final_step = 0.0;
  for (int level = 0; level < opts.zoom_levels; level++) {
    std::vector<double> step(su(dim), 0.0);
    std::vector<int> npts(su(dim), 1);
    for (int d = 0; d < dim; d++) {
      if (hi[su(d)] > lo[su(d)] + 1e-15) {
        npts[su(d)] = opts.steps;
        step[su(d)] = (hi[su(d)] - lo[su(d)]) / (opts.steps - 1);
      }
    }
    long count = 1;
    for (int d = 0; d < dim; d++) count *= npts[su(d)];

    std::vector<SystemState> warm(su(cs.T));
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(cs.n_bids(), cs.T);
    for (int j = 0; j < cs.n_bids(); j++)
      for (int t = 0; t < cs.T; t++) x(j, t) = cs.bids[su(j)].lb[su(t)];

    for (long p = 0; p < count; p++) {
      long rem = p;
      for (int d = 0; d < dim; d++) {
        const int k = static_cast<int>(rem % npts[su(d)]);
        rem /= npts[su(d)];
        const auto [j, t] = ctx.coords[su(d)];
        x(j, t) = lo[su(d)] + k * step[su(d)];
      }
      // cheap screens before any power flow: bounds/ramp/energy over the
      // fixed coordinates only (balancers unknown yet)
      bool screened = true;
      for (const EnergyGroup& g : cs.energy_groups) {
        double sum = 0.0;
        bool has_balancer = false;
        for (int j : g.members) {
          if (std::find(ctx.balancers.begin(), ctx.balancers.end(), j) != ctx.balancers.end())
            has_balancer = true;
          else
            for (int t = 0; t < cs.T; t++) sum += x(j, t);
        }
        if (!has_balancer && (sum > g.e_max + 1e-9 || sum + 1e-9 < g.e_min)) screened = false;
      }
      if (!screened) continue;

      Evaluation ev = evaluate_point(ctx, x, &warm);
      if (!ev.feasible) continue;
      if (ev.cost < incumbent.cost - 1e-12 ||
          (std::abs(ev.cost - incumbent.cost) <= 1e-12 && incumbent.x.size() &&
           lex_less(ev.x, incumbent.x))) {
        incumbent = ev;
      }
    }
    if (!incumbent.feasible) {
      if (level == 0) throw NoFeasiblePoint("no grid point satisfies all constraints");
      break;
    }
    // shrink around the incumbent
    final_step = 0.0;
    for (int d = 0; d < dim; d++) final_step = std::max(final_step, step[su(d)]);
    for (int d = 0; d < dim; d++) {
      const auto [j, t] = ctx.coords[su(d)];
      const double c = incumbent.x(j, t);
      const double w = 1.25 * step[su(d)];
      lo[su(d)] = std::max(cs.bids[su(j)].lb[su(t)], c - w);
      hi[su(d)] = std::min(cs.bids[su(j)].ub[su(t)], c + w);
    }
  }
  if (!incumbent.feasible) throw NoFeasiblePoint("no feasible point found");

  // --- polish: identify the binding rows and solve them exactly ---------
  OracleResult res;
  res.balancer_bids = ctx.balancers;
  res.grid_step = final_step;

  const double btol = std::max(opts.active_tol, 3.0 * final_step);
  struct Equation {
    std::string label;
    std::function<double(const Evaluation&)> value;
  };
  std::vector<Equation> eqs;
  std::vector<std::pair<int, int>> unknowns;

  for (int d = 0; d < dim; d++) {
    const auto [j, t] = ctx.coords[su(d)];
    const Bid& bid = cs.bids[su(j)];
    const double v = incumbent.x(j, t);
    if (v - bid.lb[su(t)] <= btol) {
      incumbent.x(j, t) = bid.lb[su(t)];
    } else if (bid.ub[su(t)] - v <= btol) {
      incumbent.x(j, t) = bid.ub[su(t)];
    } else {
      unknowns.emplace_back(j, t);
    }
  }
  for (int isl = 0; isl < cs.n_islands(); isl++) {
    const int j = ctx.balancers[su(isl)];
    const Bid& bid = cs.bids[su(j)];
    for (int t = 0; t < cs.T; t++) {
      const double v = incumbent.x(j, t);
      if (v - bid.lb[su(t)] <= btol) {
        const double bound = bid.lb[su(t)];
        eqs.push_back({"lb " + bid.id + " hour " + std::to_string(t),
                       [j, t, bound](const Evaluation& e) { return e.x(j, t) - bound; }});
      } else if (bid.ub[su(t)] - v <= btol) {
        const double bound = bid.ub[su(t)];
        eqs.push_back({"ub " + bid.id + " hour " + std::to_string(t),
                       [j, t, bound](const Evaluation& e) { return e.x(j, t) - bound; }});
      }
    }
  }
  for (int j = 0; j < cs.n_bids(); j++) {
    const Bid& bid = cs.bids[su(j)];
    double prev = bid.p_initial;
    for (int t = 0; t < cs.T; t++) {
      const double dv = incumbent.x(j, t) - prev;
      if (std::isfinite(bid.ramp_up) && std::abs(dv - bid.ramp_up) <= btol) {
        const double lim = bid.ramp_up, p0 = bid.p_initial;
        eqs.push_back({"ramp up " + bid.id + " hour " + std::to_string(t),
                       [j, t, lim, p0](const Evaluation& e) {
                         return e.x(j, t) - (t ? e.x(j, t - 1) : p0) - lim;
                       }});
      } else if (std::isfinite(bid.ramp_down) && std::abs(dv + bid.ramp_down) <= btol) {
        const double lim = bid.ramp_down, p0 = bid.p_initial;
        eqs.push_back({"ramp down " + bid.id + " hour " + std::to_string(t),
                       [j, t, lim, p0](const Evaluation& e) {
                         return (t ? e.x(j, t - 1) : p0) - e.x(j, t) - lim;
                       }});
      }
      prev = incumbent.x(j, t);
    }
  }
  for (size_t gi = 0; gi < cs.energy_groups.size(); gi++) {
    const EnergyGroup& g = cs.energy_groups[gi];
    double sum = 0.0;
    for (int t = 0; t < cs.T; t++)
      for (int j : g.members) sum += incumbent.x(j, t);
    const auto members = g.members;
    if (std::isfinite(g.e_max) && std::abs(sum - g.e_max) <= btol) {
      const double lim = g.e_max;
      eqs.push_back({"energy max " + g.id, [members, lim](const Evaluation& e) {
                       double s = 0.0;
                       for (int t = 0; t < e.x.cols(); t++)
                         for (int j : members) s += e.x(j, t);
                       return s - lim;
                     }});
    } else if (std::abs(sum - g.e_min) <= btol) {
      const double lim = g.e_min;
      eqs.push_back({"energy min " + g.id, [members, lim](const Evaluation& e) {
                       double s = 0.0;
                       for (int t = 0; t < e.x.cols(); t++)
                         for (int j : members) s += e.x(j, t);
                       return s - lim;
                     }});
    }
  }
  for (int t = 0; t < cs.T; t++) {
    StateIndex idx = StateIndex::build(cs, incumbent.states[su(t)]);
    std::vector<int> all(cs.flow_constraints.size());
    for (size_t k = 0; k < all.size(); k++) all[k] = static_cast<int>(k);
    Eigen::VectorXd G = eval_flow_constraints(incumbent.states[su(t)], cs, ctx.adms[su(t)], idx,
                                              all, false)
                            .value;
    for (int k = 0; k < G.size(); k++) {
      if (std::abs(G(k) - cs.flow_constraints[su(k)].limit[su(t)]) > btol) continue;
      const double lim = cs.flow_constraints[su(k)].limit[su(t)];
      const int kk = k, tt = t;
      auto adm = &ctx.adms[su(t)];
      eqs.push_back({"flow " + cs.flow_constraints[su(k)].id + " hour " + std::to_string(t),
                     [&cs, kk, tt, lim, adm](const Evaluation& e) {
                       StateIndex ix = StateIndex::build(cs, e.states[su(tt)]);
                       return eval_flow_constraints(e.states[su(tt)], cs, *adm, ix, {kk}, false)
                                  .value(0) -
                              lim;
                     }});
    }
  }

  for (const Equation& e : eqs) res.active.push_back(e.label);

  if (eqs.size() == unknowns.size() && !eqs.empty()) {
    // FD Newton on the square active system
    Eigen::MatrixXd xp = incumbent.x;
    Evaluation cur = evaluate_point(ctx, xp, nullptr);
    const int m = static_cast<int>(eqs.size());
    bool polish_ok = cur.solved;
    for (int it = 0; polish_ok && it < 12; it++) {
      Eigen::VectorXd r(m);
      for (int i = 0; i < m; i++) r(i) = eqs[su(i)].value(cur);
      if (r.cwiseAbs().maxCoeff() <= 1e-10) break;
      Eigen::MatrixXd J(m, m);
      const double h = 1e-6;
      for (int u = 0; u < m; u++) {
        Eigen::MatrixXd xq = cur.x;
        const auto [j, t] = unknowns[su(u)];
        xq(j, t) += h;
        Evaluation evp = evaluate_point(ctx, xq, nullptr);
        xq(j, t) -= 2 * h;
        Evaluation evm = evaluate_point(ctx, xq, nullptr);
        if (!evp.solved || !evm.solved) {
          polish_ok = false;
          break;
        }
        for (int i = 0; i < m; i++)
          J(i, u) = (eqs[su(i)].value(evp) - eqs[su(i)].value(evm)) / (2 * h);
      }
      if (!polish_ok) break;
      Eigen::VectorXd du = J.fullPivLu().solve(-r);
      if (!du.allFinite() || du.cwiseAbs().maxCoeff() > 0.5) {
        polish_ok = false;
        break;
      }
      Eigen::MatrixXd xq = cur.x;
      for (int u = 0; u < m; u++) xq(unknowns[su(u)].first, unknowns[su(u)].second) += du(u);
      Evaluation next = evaluate_point(ctx, xq, nullptr);
      if (!next.solved) {
        polish_ok = false;
        break;
      }
      cur = next;
    }
    if (polish_ok) {
      Evaluation verify = evaluate_point(ctx, cur.x, nullptr);
      if (verify.feasible) {
        incumbent = verify;
        res.polished = true;
      }
    }
  } else if (eqs.empty() && unknowns.empty()) {
    // fully pinned by bounds: re-evaluate at the snapped point
    Evaluation verify = evaluate_point(ctx, incumbent.x, nullptr);
    if (verify.feasible) {
      incumbent = verify;
      res.polished = true;
    }
  }

  res.x = incumbent.x;
  res.cost = incumbent.cost;
  return res;
}

double oracle_lmp(const CaseModel& cs, int bus, int hour, double delta,
                  const OracleOptions& opts) {
  CaseModel up = cs, dn = cs;
  up.buses[su(bus)].p_load[su(hour)] += delta;
  dn.buses[su(bus)].p_load[su(hour)] -= delta;
  const double cost_up = oracle_solve(up, opts).cost;
  const double cost_dn = oracle_solve(dn, opts).cost;
  // costs are in currency for p.u. volumes; delta is p.u., so the ratio is
  // currency per p.u.-h; divide by base for currency/MWh
  return (cost_up - cost_dn) / (2 * delta) / cs.base_mva;
}

}  // namespace dispatch
