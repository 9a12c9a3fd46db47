#include "dispatch/acpf.hpp"

#include <cmath>

#include <Eigen/SparseLU>

#include "dispatch/reduction.hpp"

namespace dispatch {

namespace {

constexpr double kVHysteresis = 1e-4;  // p.u., PV switch-back band

size_t su(int i) { return static_cast<size_t>(i); }

}  // namespace

SystemState flat_state(const CaseModel& cs, int hour) {
  SystemState st;
  st.hour = hour;
  const int n = cs.n_buses();
  st.theta = Eigen::VectorXd::Zero(n);
  st.vm = Eigen::VectorXd::Ones(n);
  st.kind.resize(su(n));
  st.pinned.assign(su(n), 0);
  st.q_pin = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; i++) {
    const Bus& bus = cs.buses[su(i)];
    st.kind[su(i)] = bus.kind;
    if (bus.kind != BusKind::PQ) st.vm(i) = bus.v_set;
  }
  return st;
}

StateIndex StateIndex::build(const CaseModel& cs, const SystemState& st) {
  StateIndex idx;
  const int n = cs.n_buses();
  idx.ang_of_bus.assign(su(n), -1);
  idx.vm_of_bus.assign(su(n), -1);
  idx.p_row_of_bus.assign(su(n), -1);
  idx.q_row_of_bus.assign(su(n), -1);
  int v = 0;
  for (int i = 0; i < n; i++)
    if (st.kind[su(i)] != BusKind::Swing) idx.ang_of_bus[su(i)] = v++;
  for (int i = 0; i < n; i++)
    if (st.kind[su(i)] == BusKind::PQ) idx.vm_of_bus[su(i)] = v++;
  int r = 0;
  for (int i = 0; i < n; i++)
    if (st.kind[su(i)] != BusKind::Swing) idx.p_row_of_bus[su(i)] = r++;
  for (int i = 0; i < n; i++)
    if (st.kind[su(i)] == BusKind::PQ) idx.q_row_of_bus[su(i)] = r++;
  idx.n_free = v;
  uint64_t sig = 1469598103934665603ull;
  for (int i = 0; i < n; i++) {
    sig ^= static_cast<uint64_t>(st.kind[su(i)]) + 0x9e3779b97f4a7c15ull;
    sig *= 1099511628211ull;
  }
  idx.typing_signature = sig;
  return idx;
}

double BalanceResidual::inf_norm() const {
  double m = rows.size() ? rows.cwiseAbs().maxCoeff() : 0.0;
  if (swing.size()) m = std::max(m, swing.cwiseAbs().maxCoeff());
  return m;
}

void bus_injections(const SystemState& st, const CaseModel& cs,
                    const AdmittanceStructure& adm, Eigen::VectorXd& p, Eigen::VectorXd& q) {
  const int n = cs.n_buses();
  p = Eigen::VectorXd::Zero(n);
  q = Eigen::VectorXd::Zero(n);
  for (int col = 0; col < adm.ybus.outerSize(); col++) {
    for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(adm.ybus, col); it; ++it) {
      const int i = static_cast<int>(it.row());
      const int k = static_cast<int>(it.col());
      const double g = it.value().real(), b = it.value().imag();
      if (i == k) {
        p(i) += st.vm(i) * st.vm(i) * g;
        q(i) -= st.vm(i) * st.vm(i) * b;
      } else {
        const double th = st.theta(i) - st.theta(k);
        const double vv = st.vm(i) * st.vm(k);
        p(i) += vv * (g * std::cos(th) + b * std::sin(th));
        q(i) += vv * (g * std::sin(th) - b * std::cos(th));
      }
    }
  }
}

BalanceResidual eval_balance(const SystemState& st, const CaseModel& cs,
                             const AdmittanceStructure& adm, const Eigen::VectorXd& x_hour) {
  const int n = cs.n_buses();
  if (static_cast<int>(st.kind.size()) != n || st.theta.size() != n)
    throw DimensionMismatch("state size does not match case");
  if (x_hour.size() != cs.n_bids()) throw DimensionMismatch("bid volume size != n_bids");

  Eigen::VectorXd p, q;
  bus_injections(st, cs, adm, p, q);

  Eigen::VectorXd gen = Eigen::VectorXd::Zero(n);
  for (int bdx = 0; bdx < cs.n_bids(); bdx++) gen(cs.bids[su(bdx)].bus) += x_hour(bdx);

  StateIndex idx = StateIndex::build(cs, st);
  BalanceResidual res;
  res.rows = Eigen::VectorXd::Zero(idx.n_free);
  res.swing = Eigen::VectorXd::Zero(cs.n_islands());
  const int t = st.hour;
  for (int i = 0; i < n; i++) {
    const Bus& bus = cs.buses[su(i)];
    const double rp = p(i) + bus.p_load[su(t)] - gen(i);
    if (idx.p_row_of_bus[su(i)] >= 0) {
      res.rows(idx.p_row_of_bus[su(i)]) = rp;
    } else {
      res.swing(cs.island_of_bus(i)) += rp;
    }
    if (idx.q_row_of_bus[su(i)] >= 0) {
      const double q_gen = st.pinned[su(i)] != 0 ? st.q_pin(i) : 0.0;
      res.rows(idx.q_row_of_bus[su(i)]) = q(i) + bus.q_load[su(t)] - q_gen;
    }
  }
  return res;
}

void eval_jacobian(const SystemState& st, const CaseModel& cs, const AdmittanceStructure& adm,
                   const StateIndex& idx, Eigen::SparseMatrix<double>& DF, Eigen::MatrixXd& DF0) {
  const int n = cs.n_buses();
  if (static_cast<int>(st.kind.size()) != n) throw DimensionMismatch("state size does not match case");
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(adm.ybus.nonZeros()) * 8);
  DF0 = Eigen::MatrixXd::Zero(cs.n_islands(), idx.n_free);

  // Row targets: free P/Q rows, or the island swing row for swing buses.
  auto add = [&](int row_bus, bool q_row, int col, double val) {
    if (col < 0) return;
    int row = q_row ? idx.q_row_of_bus[su(row_bus)] : idx.p_row_of_bus[su(row_bus)];
    if (row >= 0) {
      trips.emplace_back(row, col, val);
    } else if (!q_row) {
      DF0(cs.island_of_bus(row_bus), col) += val;
    }
  };

  for (int col = 0; col < adm.ybus.outerSize(); col++) {
    for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(adm.ybus, col); it; ++it) {
      const int i = static_cast<int>(it.row());
      const int k = static_cast<int>(it.col());
      const double g = it.value().real(), b = it.value().imag();
      const bool has_q_row = idx.q_row_of_bus[su(i)] >= 0;
      if (i == k) {
        add(i, false, idx.vm_of_bus[su(i)], 2.0 * st.vm(i) * g);
        if (has_q_row) add(i, true, idx.vm_of_bus[su(i)], -2.0 * st.vm(i) * b);
        continue;
      }
      const double th = st.theta(i) - st.theta(k);
      const double tik = g * std::cos(th) + b * std::sin(th);
      const double uik = g * std::sin(th) - b * std::cos(th);
      const double vv = st.vm(i) * st.vm(k);
      // P_i row
      add(i, false, idx.ang_of_bus[su(k)], vv * uik);
      add(i, false, idx.ang_of_bus[su(i)], -vv * uik);
      add(i, false, idx.vm_of_bus[su(k)], st.vm(i) * tik);
      add(i, false, idx.vm_of_bus[su(i)], st.vm(k) * tik);
      // Q_i row
      if (has_q_row) {
        add(i, true, idx.ang_of_bus[su(k)], -vv * tik);
        add(i, true, idx.ang_of_bus[su(i)], vv * tik);
        add(i, true, idx.vm_of_bus[su(k)], st.vm(i) * uik);
        add(i, true, idx.vm_of_bus[su(i)], st.vm(k) * uik);
      }
    }
  }
  DF.resize(idx.n_free, idx.n_free);
  DF.setFromTriplets(trips.begin(), trips.end());
}

int pv_pq_switch(SystemState& st, const CaseModel& cs, const AdmittanceStructure& adm) {
  Eigen::VectorXd p, q;
  bus_injections(st, cs, adm, p, q);
  int changes = 0;
  for (int i = 0; i < cs.n_buses(); i++) {
    const Bus& bus = cs.buses[su(i)];
    if (bus.kind != BusKind::PV) continue;
    if (st.kind[su(i)] == BusKind::PV) {
      const double q_need = q(i) + bus.q_load[su(st.hour)];
      if (q_need > bus.q_max) {
        st.kind[su(i)] = BusKind::PQ;
        st.pinned[su(i)] = +1;
        st.q_pin(i) = bus.q_max;
        changes++;
      } else if (q_need < bus.q_min) {
        st.kind[su(i)] = BusKind::PQ;
        st.pinned[su(i)] = -1;
        st.q_pin(i) = bus.q_min;
        changes++;
      }
    } else if (st.pinned[su(i)] != 0) {
      // Release only once V crosses back past the setpoint.
      const bool release = st.pinned[su(i)] > 0 ? st.vm(i) > bus.v_set + kVHysteresis
                                                : st.vm(i) < bus.v_set - kVHysteresis;
      if (release) {
        st.kind[su(i)] = BusKind::PV;
        st.pinned[su(i)] = 0;
        st.q_pin(i) = 0.0;
        st.vm(i) = bus.v_set;
        changes++;
      }
    }
  }
  return changes;
}

SystemState newton_power_flow(const CaseModel& cs, int hour, const Eigen::VectorXd& x,
                              const SystemState& start, const NewtonOptions& opts) {
  AdmittanceStructure adm = build_admittance(cs, hour);
  SystemState st = start;
  st.hour = hour;

  int total_iters = 0;
  for (int outer = 0; outer < 12; outer++) {
    StateIndex idx = StateIndex::build(cs, st);
    Eigen::SparseMatrix<double> DF;
    Eigen::MatrixXd DF0;
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    bool analyzed = false;
    while (true) {
      BalanceResidual res = eval_balance(st, cs, adm, x);
      const double err = res.rows.size() ? res.rows.cwiseAbs().maxCoeff() : 0.0;
      if (err <= opts.tol) break;
      if (++total_iters > opts.max_iter)
        throw NonConvergence("power flow did not converge in " + std::to_string(opts.max_iter) +
                             " iterations (residual " + std::to_string(err) + " p.u.)");
      eval_jacobian(st, cs, adm, idx, DF, DF0);
      if (!analyzed) {
        lu.analyzePattern(DF);
        analyzed = true;
      }
      lu.factorize(DF);
      if (lu.info() != Eigen::Success)
        throw SingularJacobian("power-flow Jacobian numerically singular at hour " +
                               std::to_string(hour));
      Eigen::VectorXd dy = lu.solve(-res.rows);
      if (!dy.allFinite())
        throw SingularJacobian("power-flow step not finite at hour " + std::to_string(hour));
      // Keep magnitudes positive; limit the step to stay in the basin.
      double scale = 1.0;
      const double max_step = dy.size() ? dy.cwiseAbs().maxCoeff() : 0.0;
      if (max_step > 1.0) scale = 1.0 / max_step;
      for (int i = 0; i < cs.n_buses(); i++) {
        if (idx.ang_of_bus[su(i)] >= 0) st.theta(i) += scale * dy(idx.ang_of_bus[su(i)]);
        if (idx.vm_of_bus[su(i)] >= 0) {
          st.vm(i) += scale * dy(idx.vm_of_bus[su(i)]);
          if (st.vm(i) < 0.05) st.vm(i) = 0.05;
        }
      }
    }
    if (!opts.pv_pq_switching || pv_pq_switch(st, cs, adm) == 0) return st;
  }
  throw NonConvergence("PV-PQ typing did not stabilize at hour " + std::to_string(hour));
}

FlowEval eval_flow_constraints(const SystemState& st, const CaseModel& cs,
                               const AdmittanceStructure& adm, const StateIndex& idx,
                               const std::vector<int>& subset, bool with_grad) {
  FlowEval ev;
  const int m = static_cast<int>(subset.size());
  ev.value = Eigen::VectorXd::Zero(m);
  if (with_grad) ev.grad = Eigen::MatrixXd::Zero(m, idx.n_free);
  for (int r = 0; r < m; r++) {
    const FlowConstraint& fc = cs.flow_constraints[su(subset[su(r)])];
    for (const FlowTerm& term : fc.terms) {
      const Branch& br = cs.branches[su(term.branch)];
      const auto& port = adm.ports[su(term.branch)];
      if (!port.in_service) continue;
      const int f = br.from, t = br.to;
      const double gff = port.yff.real();
      const double gft = port.yft.real(), bft = port.yft.imag();
      const double th = st.theta(f) - st.theta(t);
      const double c = std::cos(th), s = std::sin(th);
      const double vf = st.vm(f), vt = st.vm(t);
      ev.value(r) += term.sign * (vf * vf * gff + vf * vt * (gft * c + bft * s));
      if (!with_grad) continue;
      const double ddth = vf * vt * (-gft * s + bft * c);
      if (idx.ang_of_bus[su(f)] >= 0) ev.grad(r, idx.ang_of_bus[su(f)]) += term.sign * ddth;
      if (idx.ang_of_bus[su(t)] >= 0) ev.grad(r, idx.ang_of_bus[su(t)]) -= term.sign * ddth;
      if (idx.vm_of_bus[su(f)] >= 0)
        ev.grad(r, idx.vm_of_bus[su(f)]) += term.sign * (2.0 * vf * gff + vt * (gft * c + bft * s));
      if (idx.vm_of_bus[su(t)] >= 0)
        ev.grad(r, idx.vm_of_bus[su(t)]) += term.sign * (vf * (gft * c + bft * s));
    }
  }
  return ev;
}

double total_loss(const SystemState& st, const CaseModel& cs, const AdmittanceStructure& adm) {
  Eigen::VectorXd p, q;
  bus_injections(st, cs, adm, p, q);
  return p.sum();
}

Eigen::VectorXd loss_gradient_y(const SystemState& st, const CaseModel& cs,
                                const AdmittanceStructure& adm, const StateIndex& idx) {
  if (static_cast<int>(st.kind.size()) != cs.n_buses())
    throw DimensionMismatch("state size does not match case");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(idx.n_free);
  for (int col = 0; col < adm.ybus.outerSize(); col++) {
    for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(adm.ybus, col); it; ++it) {
      const int i = static_cast<int>(it.row());
      const int k = static_cast<int>(it.col());
      const double g = it.value().real(), b = it.value().imag();
      if (i == k) {
        if (idx.vm_of_bus[su(i)] >= 0) grad(idx.vm_of_bus[su(i)]) += 2.0 * st.vm(i) * g;
        continue;
      }
      const double th = st.theta(i) - st.theta(k);
      const double tik = g * std::cos(th) + b * std::sin(th);
      const double uik = g * std::sin(th) - b * std::cos(th);
      const double vv = st.vm(i) * st.vm(k);
      if (idx.ang_of_bus[su(k)] >= 0) grad(idx.ang_of_bus[su(k)]) += vv * uik;
      if (idx.ang_of_bus[su(i)] >= 0) grad(idx.ang_of_bus[su(i)]) -= vv * uik;
      if (idx.vm_of_bus[su(k)] >= 0) grad(idx.vm_of_bus[su(k)]) += st.vm(i) * tik;
      if (idx.vm_of_bus[su(i)] >= 0) grad(idx.vm_of_bus[su(i)]) += st.vm(k) * tik;
    }
  }
  return grad;
}

LossGradients loss_and_gradients(const SystemState& st, const CaseModel& cs,
                                 const AdmittanceStructure& adm, const StateIndex& idx,
                                 LuHandle& lu) {
  LossGradients out;
  out.loss = total_loss(st, cs, adm);
  const int n = cs.n_buses();
  out.dl_dxa = Eigen::VectorXd::Zero(n);
  out.dl_dxr = Eigen::VectorXd::Zero(n);
  if (idx.n_free == 0) return out;
  Eigen::VectorXd w = lu.solve_transpose(loss_gradient_y(st, cs, adm, idx));
  for (int i = 0; i < n; i++) {
    if (idx.p_row_of_bus[su(i)] >= 0) out.dl_dxa(i) = w(idx.p_row_of_bus[su(i)]);
    if (idx.q_row_of_bus[su(i)] >= 0) out.dl_dxr(i) = w(idx.q_row_of_bus[su(i)]);
  }
  return out;
}

Eigen::SparseMatrix<double> constraint_hessian(const SystemState& st, const CaseModel& cs,
                                               const AdmittanceStructure& adm,
                                               const StateIndex& idx, const HessianWeights& w) {
  const int n = cs.n_buses();
  if (w.lambda_rows.size() != idx.n_free)
    throw DimensionMismatch("lambda_rows size != n_free");
  if (w.lambda0.size() != cs.n_islands())
    throw DimensionMismatch("lambda0 size != n_islands");
  if (w.sigma.size() != static_cast<Eigen::Index>(w.flow_subset.size()))
    throw DimensionMismatch("sigma size != flow subset size");

  // Multiplier on each bus's P and Q injection function.
  Eigen::VectorXd wp = Eigen::VectorXd::Zero(n), wq = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < n; i++) {
    if (idx.p_row_of_bus[su(i)] >= 0) wp(i) = w.lambda_rows(idx.p_row_of_bus[su(i)]);
    else wp(i) = w.lambda0(cs.island_of_bus(i));
    if (idx.q_row_of_bus[su(i)] >= 0) wq(i) = w.lambda_rows(idx.q_row_of_bus[su(i)]);
  }

  std::vector<Eigen::Triplet<double>> trips;
  auto emit = [&](int r, int c, double v) {
    if (r >= 0 && c >= 0) trips.emplace_back(r, c, v);
  };
  // Second derivative of weight * Vi*Vk*(a cos th + b sin th), th = th_i - th_k.
  auto pair_term = [&](int i, int k, double a, double b) {
    const double th = st.theta(i) - st.theta(k);
    const double f1 = a * std::cos(th) + b * std::sin(th);
    const double f2 = -a * std::sin(th) + b * std::cos(th);
    const double vi = st.vm(i), vk = st.vm(k);
    const int ai = idx.ang_of_bus[su(i)], ak = idx.ang_of_bus[su(k)];
    const int mi = idx.vm_of_bus[su(i)], mk = idx.vm_of_bus[su(k)];
    emit(ai, ai, -vi * vk * f1);
    emit(ak, ak, -vi * vk * f1);
    emit(ai, ak, vi * vk * f1);
    emit(ak, ai, vi * vk * f1);
    emit(ai, mi, vk * f2);
    emit(mi, ai, vk * f2);
    emit(ai, mk, vi * f2);
    emit(mk, ai, vi * f2);
    emit(ak, mi, -vk * f2);
    emit(mi, ak, -vk * f2);
    emit(ak, mk, -vi * f2);
    emit(mk, ak, -vi * f2);
    emit(mi, mk, f1);
    emit(mk, mi, f1);
  };

  for (int col = 0; col < adm.ybus.outerSize(); col++) {
    for (Eigen::SparseMatrix<std::complex<double>>::InnerIterator it(adm.ybus, col); it; ++it) {
      const int i = static_cast<int>(it.row());
      const int k = static_cast<int>(it.col());
      const double g = it.value().real(), b = it.value().imag();
      if (i == k) {
        // wp*Vi^2*Gii - wq*Vi^2*Bii
        const double c = 2.0 * (wp(i) * g - wq(i) * b);
        emit(idx.vm_of_bus[su(i)], idx.vm_of_bus[su(i)], c);
        continue;
      }
      if (wp(i) == 0.0 && wq(i) == 0.0) continue;
      // P term: a=g, b=b; Q term: a=-b, b=g.
      pair_term(i, k, wp(i) * g - wq(i) * b, wp(i) * b + wq(i) * g);
    }
  }

  for (size_t s = 0; s < w.flow_subset.size(); s++) {
    const double sig = w.sigma(static_cast<Eigen::Index>(s));
    if (sig == 0.0) continue;
    const FlowConstraint& fc = cs.flow_constraints[su(w.flow_subset[s])];
    for (const FlowTerm& term : fc.terms) {
      const auto& port = adm.ports[su(term.branch)];
      if (!port.in_service) continue;
      const Branch& br = cs.branches[su(term.branch)];
      const double wgt = sig * term.sign;
      pair_term(br.from, br.to, wgt * port.yft.real(), wgt * port.yft.imag());
      emit(idx.vm_of_bus[su(br.from)], idx.vm_of_bus[su(br.from)], 2.0 * wgt * port.yff.real());
    }
  }

  Eigen::SparseMatrix<double> H(idx.n_free, idx.n_free);
  H.setFromTriplets(trips.begin(), trips.end());
  return H;
}

}  // namespace dispatch
