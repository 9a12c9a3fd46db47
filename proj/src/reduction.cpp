#include "dispatch/reduction.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseLU>

namespace dispatch {

namespace {
size_t su(int i) { return static_cast<size_t>(i); }

uint64_t pattern_hash(const Eigen::SparseMatrix<double>& A) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull;
    h *= 1099511628211ull;
  };
  mix(static_cast<uint64_t>(A.rows()));
  for (int col = 0; col < A.outerSize(); col++)
    for (Eigen::SparseMatrix<double>::InnerIterator it(A, col); it; ++it)
      mix((static_cast<uint64_t>(it.row()) << 24) ^ static_cast<uint64_t>(it.col()));
  return h;
}
}  // namespace

LuHandle LuHandle::factorize(const Eigen::SparseMatrix<double>& DF, const LuHandle* prior) {
  LuHandle h;
  h.n_ = static_cast<int>(DF.rows());
  h.counter_ = std::make_shared<long>(0);
  h.pattern_sig_ = pattern_hash(DF);
  if (h.n_ == 0) {
    h.sigma_min_ = kInf;
    return h;
  }
  if (prior && prior->lu_ && prior->pattern_sig_ == h.pattern_sig_) {
    h.lu_ = prior->lu_;  // symbolic analysis retained
  } else {
    h.lu_ = std::make_shared<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
    h.lu_->analyzePattern(DF);
  }
  h.lu_->factorize(DF);
  if (h.lu_->info() != Eigen::Success)
    throw NumericallySingular("sparse LU factorization failed (structurally or numerically singular)");

  // Inverse-power estimate of the smallest singular value; the iterate
  // doubles as the near-null direction for weak-location reporting.
  double scale = 0.0;
  for (int col = 0; col < DF.outerSize(); col++)
    for (Eigen::SparseMatrix<double>::InnerIterator it(DF, col); it; ++it)
      scale = std::max(scale, std::abs(it.value()));
  uint64_t seed = 0x2545F4914F6CDD1Dull;
  Eigen::VectorXd v(h.n_);
  for (int i = 0; i < h.n_; i++) {
    seed = seed * 6364136223846793005ull + 1442695040888963407ull;
    v(i) = static_cast<double>(seed >> 11) / 9007199254740992.0 - 0.5;
  }
  v.normalize();
  double sigma = kInf;
  for (int it = 0; it < 4; it++) {
    Eigen::VectorXd u = h.lu_->solve(v);
    Eigen::VectorXd w = h.lu_->transpose().solve(u / u.norm());
    sigma = 1.0 / w.norm();
    v = w.normalized();
    if (!v.allFinite()) {
      sigma = 0.0;
      break;
    }
  }
  h.sigma_min_ = sigma;
  h.near_null_ = v;
  if (sigma < 1e-12 * std::max(1.0, scale))
    throw NumericallySingular("Jacobian within 1e-12 of singular (smallest singular value " +
                              std::to_string(sigma) + ")");
  return h;
}

Eigen::VectorXd LuHandle::solve(const Eigen::VectorXd& rhs) const {
  if (n_ == 0) return Eigen::VectorXd(0);
  if (rhs.size() != n_) throw DimensionMismatch("LuHandle::solve rhs size");
  if (counter_) (*counter_)++;
  return lu_->solve(rhs);
}

Eigen::VectorXd LuHandle::solve_transpose(const Eigen::VectorXd& rhs) const {
  if (n_ == 0) return Eigen::VectorXd(0);
  if (rhs.size() != n_) throw DimensionMismatch("LuHandle::solve_transpose rhs size");
  if (counter_) (*counter_)++;
  return lu_->transpose().solve(rhs);
}

void reduced_gradients(const LuHandle& lu, const CaseModel& cs, const IncidenceMap& inc,
                       const StateIndex& idx, const Eigen::MatrixXd& DF0,
                       const Eigen::MatrixXd& DG_active, Eigen::MatrixXd& L0, Eigen::MatrixXd& S) {
  const int nb = cs.n_bids();
  const int ni = cs.n_islands();
  const int ns = static_cast<int>(DG_active.rows());
  L0 = Eigen::MatrixXd::Zero(ni, nb);
  S = Eigen::MatrixXd::Zero(ns, nb);

  for (int isl = 0; isl < ni; isl++) {
    Eigen::VectorXd w;
    if (idx.n_free > 0) w = lu.solve_transpose(DF0.row(isl).transpose());
    for (int j = 0; j < nb; j++) {
      const int bus = inc.bid_bus[su(j)];
      if (cs.island_of_bus(bus) != isl) continue;
      const int prow = idx.p_row_of_bus[su(bus)];
      L0(isl, j) = prow >= 0 ? -w(prow) : 1.0;  // direct term at the swing bus
    }
  }
  for (int r = 0; r < ns; r++) {
    Eigen::VectorXd w;
    if (idx.n_free > 0) w = lu.solve_transpose(DG_active.row(r).transpose());
    for (int j = 0; j < nb; j++) {
      const int prow = idx.p_row_of_bus[su(inc.bid_bus[su(j)])];
      if (prow >= 0) S(r, j) = w(prow);
    }
  }
}

Eigen::MatrixXd reduced_hessian(const LuHandle& lu, const CaseModel& cs, const IncidenceMap& inc,
                                const StateIndex& idx, const Eigen::SparseMatrix<double>& H,
                                const Eigen::MatrixXd* group_cols) {
  const int nb = cs.n_bids();
  const int ng = inc.n_groups();
  Eigen::MatrixXd M(std::max(idx.n_free, 1), ng);
  M.setZero();
  if (group_cols) {
    M = *group_cols;
  } else {
    // One forward solve per bus group; bids at the same bus share the column.
    for (int g = 0; g < ng; g++) {
      const int prow = idx.p_row_of_bus[su(inc.group_bus[su(g)])];
      if (prow < 0 || idx.n_free == 0) continue;  // swing-bus group: zero column
      Eigen::VectorXd e = Eigen::VectorXd::Zero(idx.n_free);
      e(prow) = 1.0;
      M.col(g).head(idx.n_free) = lu.solve(e);
    }
  }
  Eigen::MatrixXd Hg(ng, ng);
  if (idx.n_free == 0) {
    Hg.setZero();
  } else {
    Eigen::MatrixXd HM = H * M.topRows(idx.n_free);
    Hg = M.topRows(idx.n_free).transpose() * HM;
  }
  Hg = 0.5 * (Hg + Hg.transpose()).eval();

  Eigen::MatrixXd Hb(nb, nb);
  for (int p = 0; p < nb; p++)
    for (int q = 0; q < nb; q++)
      Hb(p, q) = Hg(inc.group_of_bid[su(p)], inc.group_of_bid[su(q)]);
  return Hb;
}

Eigen::MatrixXd psd_project(const Eigen::MatrixXd& H_red) {
  const int n = static_cast<int>(H_red.rows());
  if (n == 0) return H_red;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (H_red + H_red.transpose()));
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double eps = 1e-8 * std::max(1.0, ev.size() ? ev.maxCoeff() : 0.0);
  if (ev.minCoeff() >= eps) return H_red;
  Eigen::VectorXd clipped = ev.cwiseMax(eps);
  return es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::VectorXd reduced_cost(const Eigen::VectorXd& c, const Eigen::VectorXd& rF,
                             const LuHandle& lu, const CaseModel& cs, const IncidenceMap& inc,
                             const StateIndex& idx, const Eigen::SparseMatrix<double>& H) {
  if (c.size() != cs.n_bids()) throw DimensionMismatch("reduced_cost: c size");
  Eigen::VectorXd ct = c;
  if (idx.n_free == 0 || rF.size() == 0) return ct;
  Eigen::VectorXd y0 = lu.solve(rF);
  Eigen::VectorXd u = lu.solve_transpose(H * y0);
  for (int j = 0; j < cs.n_bids(); j++) {
    const int prow = idx.p_row_of_bus[su(inc.bid_bus[su(j)])];
    if (prow >= 0) ct(j) += u(prow);
  }
  return ct;
}

}  // namespace dispatch
