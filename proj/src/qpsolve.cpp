#include "dispatch/qpsolve.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dispatch {

namespace {

constexpr double kInfStep = std::numeric_limits<double>::infinity();

struct Constraint {
  Eigen::VectorXd a;  // meaning a'z >= b (equalities a'z = b)
  double b = 0.0;
  bool eq = false;
  int unit_var = -1;   // >= 0 when a = unit_sign * e_j (box rows)
  double unit_sign = 0.0;
  int label = -1;  // index into the label table
};

// Maintains J = L^-T rotated so that J' N_active = [R; 0].
struct ActiveSetCore {
  int n = 0;
  Eigen::MatrixXd J, R;
  std::vector<int> active;  // constraint ids
  Eigen::VectorXd u;        // duals aligned with `active`
  int q = 0;

  void init(const Eigen::MatrixXd& Linv_t) {
    n = static_cast<int>(Linv_t.rows());
    J = Linv_t;
    R = Eigen::MatrixXd::Zero(n, n);
    u = Eigen::VectorXd::Zero(n);
    active.clear();
    q = 0;
  }

  void rotate_j_cols(int a, int b, double c, double s) {
    double* pa = J.col(a).data();
    double* pb = J.col(b).data();
    for (int i = 0; i < n; i++) {
      const double va = pa[i], vb = pb[i];
      pa[i] = c * va + s * vb;
      pb[i] = -s * va + c * vb;
    }
  }

  // d has been rotated so entries q+1..n-1 are zero; store column of R.
  void add(int id, Eigen::VectorXd& d, double dual) {
    for (int j = n - 1; j > q; j--) {
      const double r = std::hypot(d(j - 1), d(j));
      if (r == 0.0) continue;
      const double c = d(j - 1) / r, s = d(j) / r;
      d(j - 1) = r;
      d(j) = 0.0;
      rotate_j_cols(j - 1, j, c, s);
    }
    R.col(q).head(q + 1) = d.head(q + 1);
    active.push_back(id);
    u(q) = dual;
    q++;
  }

  void drop(int pos) {
    active.erase(active.begin() + pos);
    for (int i = pos; i < q - 1; i++) {
      R.col(i).head(q) = R.col(i + 1).head(q);
      u(i) = u(i + 1);
    }
    R.col(q - 1).setZero();
    u(q - 1) = 0.0;
    q--;
    for (int j = pos; j < q; j++) {
      const double r = std::hypot(R(j, j), R(j + 1, j));
      if (r == 0.0) continue;
      const double c = R(j, j) / r, s = R(j + 1, j) / r;
      for (int col = j; col < q; col++) {
        const double va = R(j, col), vb = R(j + 1, col);
        R(j, col) = c * va + s * vb;
        R(j + 1, col) = -s * va + c * vb;
      }
      R(j + 1, j) = 0.0;
      rotate_j_cols(j, j + 1, c, s);
    }
  }
};

std::string certificate(const std::vector<Constraint>& cons,
                        const std::vector<std::string>& labels, int violated,
                        const ActiveSetCore& core, const Eigen::VectorXd& r) {
  std::ostringstream os;
  os << "infeasible subproblem: cannot satisfy '" << labels[static_cast<size_t>(cons[static_cast<size_t>(violated)].label)]
     << "' given active rows {";
  bool first = true;
  for (int j = 0; j < core.q; j++) {
    if (j < r.size() && r(j) > 1e-12) {
      if (!first) os << ", ";
      os << labels[static_cast<size_t>(cons[static_cast<size_t>(core.active[static_cast<size_t>(j)])].label)];
      first = false;
    }
  }
  os << "}";
  return os.str();
}

}  // namespace

DenseQPResult solve_dense_qp(const DenseQP& qp) {
  const int n = static_cast<int>(qp.H.rows());
  const int me = static_cast<int>(qp.Aeq.rows());
  const int mi = static_cast<int>(qp.Ain.rows());
  DenseQPResult res;
  res.y_eq = Eigen::VectorXd::Zero(me);
  res.mu = Eigen::VectorXd::Zero(mi);
  res.pi_lb = Eigen::VectorXd::Zero(n);
  res.pi_ub = Eigen::VectorXd::Zero(n);
  if (n == 0) {
    res.z = Eigen::VectorXd(0);
    return res;
  }

  // Constraint table: equalities, general rows, boxes (lb then ub per var).
  std::vector<Constraint> cons;
  std::vector<std::string> labels;
  enum class Kind { Eq, Row, Lb, Ub };
  std::vector<std::pair<Kind, int>> kinds;
  auto push = [&](Eigen::VectorXd a, double b, bool eq, Kind kind, int which,
                  const std::string& label) {
    Constraint c;
    c.a = std::move(a);
    c.b = b;
    c.eq = eq;
    if (kind == Kind::Lb || kind == Kind::Ub) {
      c.unit_var = which;
      c.unit_sign = kind == Kind::Lb ? 1.0 : -1.0;
    }
    c.label = static_cast<int>(labels.size());
    labels.push_back(label);
    kinds.emplace_back(kind, which);
    cons.push_back(std::move(c));
  };
  for (int i = 0; i < me; i++)
    push(qp.Aeq.row(i), qp.beq(i), true, Kind::Eq, i,
         i < static_cast<int>(qp.eq_labels.size()) ? qp.eq_labels[static_cast<size_t>(i)]
                                                   : "eq" + std::to_string(i));
  for (int i = 0; i < mi; i++)
    push(-qp.Ain.row(i), -qp.bin(i), false, Kind::Row, i,
         i < static_cast<int>(qp.in_labels.size()) ? qp.in_labels[static_cast<size_t>(i)]
                                                   : "ineq" + std::to_string(i));
  for (int j = 0; j < n; j++) {
    if (qp.lb.size() && std::isfinite(qp.lb(j)))
      push(Eigen::VectorXd::Unit(n, j), qp.lb(j), false, Kind::Lb, j, "lb x" + std::to_string(j));
    if (qp.ub.size() && std::isfinite(qp.ub(j)))
      push(-Eigen::VectorXd::Unit(n, j), -qp.ub(j), false, Kind::Ub, j, "ub x" + std::to_string(j));
  }
  const int m = static_cast<int>(cons.size());

  Eigen::LLT<Eigen::MatrixXd> llt(qp.H);
  if (llt.info() != Eigen::Success) {
    Eigen::MatrixXd Hr = qp.H;
    const double ridge = 1e-12 * std::max(1.0, qp.H.diagonal().cwiseAbs().maxCoeff());
    Hr.diagonal().array() += ridge;
    llt.compute(Hr);
    if (llt.info() != Eigen::Success)
      throw DispatchError("QP Hessian is not positive definite");
  }
  Eigen::MatrixXd Linv_t = Eigen::MatrixXd::Identity(n, n);
  llt.matrixL().transpose().solveInPlace<Eigen::OnTheLeft>(Linv_t);

  ActiveSetCore core;
  core.init(Linv_t);
  Eigen::VectorXd x = llt.solve(-qp.c);

  auto slack = [&](int i) {
    const Constraint& c = cons[static_cast<size_t>(i)];
    if (c.unit_var >= 0) return c.unit_sign * x(c.unit_var) - c.b;
    return c.a.dot(x) - c.b;
  };

  // step directions for constraint normal a
  Eigen::VectorXd d(n), r_dir;
  auto directions = [&](const Constraint& c, double& zz, bool& dependent) {
    if (c.unit_var >= 0)
      d = c.unit_sign * core.J.row(c.unit_var).transpose();
    else
      d = core.J.transpose() * c.a;
    const double dn = d.norm();
    zz = core.q < n ? d.tail(n - core.q).squaredNorm() : 0.0;
    dependent = std::sqrt(zz) <= 1e-12 * std::max(dn, 1e-300);
    if (core.q > 0)
      r_dir = core.R.topLeftCorner(core.q, core.q)
                  .triangularView<Eigen::Upper>()
                  .solve(d.head(core.q));
    else
      r_dir = Eigen::VectorXd(0);
  };

  // equality phase
  for (int i = 0; i < m; i++) {
    if (!cons[static_cast<size_t>(i)].eq) continue;
    double zz = 0.0;
    bool dependent = false;
    directions(cons[static_cast<size_t>(i)], zz, dependent);
    const double s = slack(i);
    if (dependent) {
      const double scale = std::max({1.0, std::abs(cons[static_cast<size_t>(i)].b), x.cwiseAbs().maxCoeff()});
      if (std::abs(s) > 1e-8 * scale)
        throw QPInfeasible("inconsistent equality row '" +
                           labels[static_cast<size_t>(cons[static_cast<size_t>(i)].label)] + "'");
      continue;  // dependent but consistent; dual stays zero
    }
    const double t = -s / zz;
    x += t * (core.J.rightCols(n - core.q) * d.tail(n - core.q));
    if (core.q > 0) core.u.head(core.q) -= t * r_dir;
    core.add(i, d, t);
  }

  // inequality loop
  const long cap = 40L * (n + m) + 200;
  long iters = 0;
  std::vector<char> in_active(static_cast<size_t>(m), 0);
  for (int id : core.active) in_active[static_cast<size_t>(id)] = 1;
  while (true) {
    if (++iters > cap) throw DispatchError("QP active-set iteration cap exceeded");
    int p = -1;
    double worst = -1e-30;
    const double tol_term = 1e-10 * std::max(1.0, x.cwiseAbs().maxCoeff());
    for (int i = 0; i < m; i++) {
      if (cons[static_cast<size_t>(i)].eq || in_active[static_cast<size_t>(i)]) continue;
      const double s = slack(i);
      if (s < worst) {
        worst = s;
        p = i;
      }
    }
    if (p < 0 || worst >= -tol_term) break;

    double u_p = 0.0;
    while (true) {
      if (++iters > cap) throw DispatchError("QP active-set iteration cap exceeded");
      double zz = 0.0;
      bool dependent = false;
      directions(cons[static_cast<size_t>(p)], zz, dependent);
      const double s_p = slack(p);

      double t1 = kInfStep;
      int k1 = -1;
      for (int j = 0; j < core.q; j++) {
        if (cons[static_cast<size_t>(core.active[static_cast<size_t>(j)])].eq) continue;
        if (j >= r_dir.size() || r_dir(j) <= 1e-14) continue;
        const double cand = core.u(j) / r_dir(j);
        if (cand < t1) {
          t1 = cand;
          k1 = j;
        }
      }
      const double t2 = dependent ? kInfStep : -s_p / zz;
      const double t = std::min(t1, t2);
      if (t == kInfStep)
        throw QPInfeasible(certificate(cons, labels, p, core, r_dir));

      if (!dependent) x += t * (core.J.rightCols(n - core.q) * d.tail(n - core.q));
      if (core.q > 0) core.u.head(core.q) -= t * r_dir;
      u_p += t;

      if (!dependent && t == t2) {
        core.add(p, d, u_p);
        in_active[static_cast<size_t>(p)] = 1;
        break;
      }
      in_active[static_cast<size_t>(core.active[static_cast<size_t>(k1)])] = 0;
      core.drop(k1);
    }
  }
  res.iterations = static_cast<int>(iters);

  // Direct KKT re-solve on the final active set restores precision lost to
  // large intermediate iterates (the projected Hessian can be near-singular
  // before boxes activate).
  {
    const int q = core.q;
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + q, n + q);
    K.topLeftCorner(n, n) = qp.H;
    Eigen::VectorXd rhs(n + q);
    rhs.head(n) = -qp.c;
    for (int j = 0; j < q; j++) {
      const auto& c = cons[static_cast<size_t>(core.active[static_cast<size_t>(j)])];
      K.block(0, n + j, n, 1) = -c.a;
      K.block(n + j, 0, 1, n) = c.a.transpose();
      rhs(n + j) = c.b;
    }
    Eigen::VectorXd sol = K.partialPivLu().solve(rhs);
    double resid = (K * sol - rhs).cwiseAbs().maxCoeff();
    const double kscale = std::max(1.0, rhs.cwiseAbs().maxCoeff());
    if (!(resid <= 1e-9 * kscale)) {
      sol = K.fullPivLu().solve(rhs);
      resid = (K * sol - rhs).cwiseAbs().maxCoeff();
    }
    if (resid <= 1e-8 * kscale) {
      const Eigen::VectorXd xp = sol.head(n);
      const Eigen::VectorXd up = sol.tail(q);
      bool valid = xp.allFinite();
      const double xscale = std::max(1.0, xp.cwiseAbs().maxCoeff());
      for (int j = 0; valid && j < q; j++)
        if (!cons[static_cast<size_t>(core.active[static_cast<size_t>(j)])].eq && up(j) < -1e-8 * kscale)
          valid = false;
      for (int i = 0; valid && i < m; i++) {
        if (std::find(core.active.begin(), core.active.end(), i) != core.active.end()) continue;
        const auto& c = cons[static_cast<size_t>(i)];
        const double s = c.a.dot(xp) - c.b;
        if (c.eq ? std::abs(s) > 1e-8 * xscale : s < -1e-8 * xscale) valid = false;
      }
      if (valid) {
        x = xp;
        core.u.head(q) = up;
      }
    }
  }

  res.z = x;
  for (int j = 0; j < core.q; j++) {
    const auto [kind, which] = kinds[static_cast<size_t>(core.active[static_cast<size_t>(j)])];
    const double u = core.u(j);
    switch (kind) {
      case Kind::Eq: res.y_eq(which) = -u; break;
      case Kind::Row: res.mu(which) = std::max(0.0, u); break;
      case Kind::Lb: res.pi_lb(which) = std::max(0.0, u); break;
      case Kind::Ub: res.pi_ub(which) = std::max(0.0, u); break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

DenseQP assemble_dense(const ReducedQP& qp, bool elastic, int* out_n_slack) {
  const int nb = qp.n_bids, T = qp.T;
  const int nv = qp.vars();
  int ns_total = 0;
  for (const auto& rows : qp.s_rows) ns_total += static_cast<int>(rows.size());
  const int n_slack = elastic ? ns_total : 0;
  if (out_n_slack) *out_n_slack = n_slack;
  const int n = nv + n_slack;

  DenseQP d;
  d.H = Eigen::MatrixXd::Zero(n, n);
  d.c = Eigen::VectorXd::Zero(n);
  d.lb = Eigen::VectorXd::Constant(n, -kInf);
  d.ub = Eigen::VectorXd::Constant(n, kInf);
  int me = 0;
  for (int t = 0; t < T; t++) me += static_cast<int>(qp.hours[static_cast<size_t>(t)].L0.rows());
  const int mit = static_cast<int>(qp.IT.rows());
  d.Aeq = Eigen::MatrixXd::Zero(me, n);
  d.beq = Eigen::VectorXd::Zero(me);
  d.Ain = Eigen::MatrixXd::Zero(ns_total + mit, n);
  d.bin = Eigen::VectorXd::Zero(ns_total + mit);

  int eq_at = 0, in_at = 0, slack_at = nv;
  for (int t = 0; t < T; t++) {
    const ReducedBlocks& blk = qp.hours[static_cast<size_t>(t)];
    d.H.block(t * nb, t * nb, nb, nb) = blk.H_plus;
    d.c.segment(t * nb, nb) = blk.c_tilde;
    for (int i = 0; i < blk.L0.rows(); i++) {
      d.Aeq.block(eq_at, t * nb, 1, nb) = blk.L0.row(i);
      d.beq(eq_at) = blk.rL(i);
      d.eq_labels.push_back("balance island " + std::to_string(i) + " hour " + std::to_string(t));
      eq_at++;
    }
    for (int i = 0; i < blk.S.rows(); i++) {
      d.Ain.block(in_at, t * nb, 1, nb) = blk.S.row(i);
      d.bin(in_at) = blk.rS(i);
      d.in_labels.push_back("flow row " + std::to_string(qp.s_rows[static_cast<size_t>(t)][static_cast<size_t>(i)]) +
                            " hour " + std::to_string(t));
      if (elastic) {
        d.Ain(in_at, slack_at) = -1.0;
        slack_at++;
      }
      in_at++;
    }
  }
  for (int k = 0; k < qp.IT.outerSize(); k++)
    for (Eigen::SparseMatrix<double>::InnerIterator it(qp.IT, k); it; ++it)
      d.Ain(in_at + static_cast<int>(it.row()), static_cast<int>(it.col())) = it.value();
  for (int i = 0; i < mit; i++) {
    d.bin(in_at + i) = qp.r_it(i);
    d.in_labels.push_back(i < static_cast<int>(qp.it_labels.size())
                              ? qp.it_labels[static_cast<size_t>(i)]
                              : "intertemporal " + std::to_string(i));
  }
  d.lb.head(nv) = qp.dlb;
  d.ub.head(nv) = qp.dub;
  if (elastic) {
    const double eps_s = 1e-8 * std::max(1.0, qp.elastic_penalty);
    for (int s = 0; s < n_slack; s++) {
      d.H(nv + s, nv + s) = eps_s;
      d.c(nv + s) = qp.elastic_penalty;
      d.lb(nv + s) = 0.0;
    }
  }
  return d;
}

}  // namespace

QPSolution solve_qp(const ReducedQP& qp) {
  const int T = qp.T, nv = qp.vars();
  bool elastic = false;
  int n_slack = 0;
  DenseQP dense = assemble_dense(qp, false, &n_slack);
  DenseQPResult raw;
  try {
    raw = solve_dense_qp(dense);
  } catch (const QPInfeasible&) {
    if (!(qp.elastic_penalty > 0)) throw;
    elastic = true;
    dense = assemble_dense(qp, true, &n_slack);
    raw = solve_dense_qp(dense);  // still throws on intertemporal contradictions
  }

  QPSolution sol;
  sol.iterations = raw.iterations;
  sol.relaxed = elastic;
  sol.dx = raw.z.head(nv);
  sol.pi_lb = raw.pi_lb.head(nv);
  sol.pi_ub = raw.pi_ub.head(nv);

  int eq_at = 0, in_at = 0;
  sol.lambda0.resize(static_cast<size_t>(T));
  sol.sigma.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; t++) {
    const int ni = static_cast<int>(qp.hours[static_cast<size_t>(t)].L0.rows());
    sol.lambda0[static_cast<size_t>(t)] = -raw.y_eq.segment(eq_at, ni);
    eq_at += ni;
    const int ns = static_cast<int>(qp.hours[static_cast<size_t>(t)].S.rows());
    sol.sigma[static_cast<size_t>(t)] = raw.mu.segment(in_at, ns);
    in_at += ns;
  }
  sol.mu_it = raw.mu.tail(raw.mu.size() - in_at);

  if (elastic) {
    const Eigen::VectorXd s = raw.z.tail(n_slack);
    int at = 0;
    for (int t = 0; t < T; t++)
      for (size_t i = 0; i < qp.s_rows[static_cast<size_t>(t)].size(); i++, at++)
        if (s(at) > 1e-7) {
          sol.relaxed_rows.push_back("flow row " +
                                     std::to_string(qp.s_rows[static_cast<size_t>(t)][i]) +
                                     " hour " + std::to_string(t) + " relaxed by " +
                                     std::to_string(s(at)));
          sol.relaxed_flow.push_back({t, qp.s_rows[static_cast<size_t>(t)][i], s(at)});
        }
  }

  // Aggregate dual per bid-hour: IT' mu + pi_ub - pi_lb closes stationarity.
  sol.pi = sol.pi_ub - sol.pi_lb;
  if (qp.IT.rows() > 0) {
    Eigen::VectorXd itmu = Eigen::VectorXd::Zero(nv);
    for (int k = 0; k < qp.IT.outerSize(); k++)
      for (Eigen::SparseMatrix<double>::InnerIterator it(qp.IT, k); it; ++it)
        itmu(it.col()) += it.value() * sol.mu_it(it.row());
    sol.pi += itmu;
  }
  return sol;
}

double kkt_residual(const ReducedQP& qp, const QPSolution& sol) {
  const int nb = qp.n_bids, T = qp.T, nv = qp.vars();
  if (sol.dx.size() != nv) throw DimensionMismatch("kkt_residual: dx size");
  double worst = 0.0;
  auto bump = [&](double v) { worst = std::max(worst, std::abs(v)); };

  // stationarity: H dx + c - L0' lambda0 + S' sigma + pi = 0 per hour block
  for (int t = 0; t < T; t++) {
    const ReducedBlocks& blk = qp.hours[static_cast<size_t>(t)];
    Eigen::VectorXd g = blk.H_plus * sol.dx.segment(t * nb, nb) + blk.c_tilde;
    if (blk.L0.rows()) g -= blk.L0.transpose() * sol.lambda0[static_cast<size_t>(t)];
    if (blk.S.rows()) g += blk.S.transpose() * sol.sigma[static_cast<size_t>(t)];
    g += sol.pi.segment(t * nb, nb);
    for (int j = 0; j < nb; j++) bump(g(j));

    // primal feasibility
    Eigen::VectorXd eq = blk.L0 * sol.dx.segment(t * nb, nb) - blk.rL;
    for (int i = 0; i < eq.size(); i++) bump(eq(i));
    Eigen::VectorXd sl = blk.rS - blk.S * sol.dx.segment(t * nb, nb);
    for (int i = 0; i < sl.size(); i++) {
      bump(std::min(0.0, sl(i)));
      bump(sol.sigma[static_cast<size_t>(t)](i) * sl(i));         // complementarity
      bump(std::min(0.0, sol.sigma[static_cast<size_t>(t)](i)));  // dual sign
    }
  }
  if (qp.IT.rows()) {
    Eigen::VectorXd sl = qp.r_it - qp.IT * sol.dx;
    for (int i = 0; i < sl.size(); i++) {
      bump(std::min(0.0, sl(i)));
      bump(sol.mu_it(i) * sl(i));
      bump(std::min(0.0, sol.mu_it(i)));
    }
  }
  for (int j = 0; j < nv; j++) {
    bump(std::min(0.0, sol.dx(j) - qp.dlb(j)));
    bump(std::min(0.0, qp.dub(j) - sol.dx(j)));
    if (std::isfinite(qp.dlb(j))) bump(sol.pi_lb(j) * (sol.dx(j) - qp.dlb(j)));
    if (std::isfinite(qp.dub(j))) bump(sol.pi_ub(j) * (qp.dub(j) - sol.dx(j)));
  }
  return worst;
}

}  // namespace dispatch
