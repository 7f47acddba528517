#include "cmpc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/OrderingMethods>

#include "cmpc/errors.hpp"

namespace cmpc {

using Eigen::VectorXd;

const char* to_string(QpStatus status) {
  switch (status) {
    case QpStatus::Solved: return "solved";
    case QpStatus::MaxIterations: return "max_iterations";
    case QpStatus::PrimalInfeasible: return "primal_infeasible";
    case QpStatus::DualInfeasible: return "dual_infeasible";
    case QpStatus::NumericalError: return "numerical_error";
  }
  return "unknown";
}

void QpProblem::validate() const {
  const Eigen::Index n = q.size();
  if (P.rows() != n || P.cols() != n || A.cols() != n || G.cols() != n || A.rows() != b.size() ||
      G.rows() != h.size()) {
    throw Error(ErrorCode::DimensionMismatch, "QP blocks have inconsistent sizes");
  }
}

double KktResiduals::max() const {
  return std::max({stationarity, primal_equality, primal_inequality, complementarity, dual_sign});
}

namespace {

double inf_norm(const VectorXd& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

double matrix_max_abs(const SparseMatrix& m) {
  double out = 0.0;
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) out = std::max(out, std::abs(it.value()));
  }
  return out;
}

VectorXd row_inf_norms(const SparseMatrix& m) {
  VectorXd norms = VectorXd::Zero(m.rows());
  for (int k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
      norms(it.row()) = std::max(norms(it.row()), std::abs(it.value()));
    }
  }
  return norms;
}

double max_step(const VectorXd& v, const VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  }
  return alpha;
}

// Equilibrated copy of the problem: rows of A and G scaled to unit infinity
// norm, objective scaled by `cost_scale`.
struct ScaledProblem {
  SparseMatrix P, A, G, At, Gt;
  VectorXd q, b, h;
  VectorXd row_scale_a, row_scale_g;
  double cost_scale{1};
};

ScaledProblem equilibrate(const QpProblem& p) {
  ScaledProblem s;
  s.cost_scale = 1.0 / std::max({1.0, matrix_max_abs(p.P), inf_norm(p.q)});
  auto inverse_norms = [](const SparseMatrix& m) {
    VectorXd d = row_inf_norms(m);
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = d(i) > 0.0 ? 1.0 / d(i) : 1.0;
    return d;
  };
  s.row_scale_a = inverse_norms(p.A);
  s.row_scale_g = inverse_norms(p.G);
  s.P = s.cost_scale * p.P;
  s.q = s.cost_scale * p.q;
  s.A = s.row_scale_a.asDiagonal() * p.A;
  s.b = s.row_scale_a.cwiseProduct(p.b);
  s.G = s.row_scale_g.asDiagonal() * p.G;
  s.h = s.row_scale_g.cwiseProduct(p.h);
  s.At = s.A.transpose();
  s.Gt = s.G.transpose();
  return s;
}

// Sparse LDL^T for quasi-definite matrices (positive primal block, negative
// dual block). The pattern is analyzed once; each numeric factorization
// replaces pivots of the wrong sign or tiny magnitude by +/- `delta`.
class QuasiDefiniteLdl {
 public:
  void analyze(const SparseMatrix& k, const std::vector<int>& pivot_sign) {
    n_ = static_cast<int>(k.rows());
    Eigen::AMDOrdering<int> ordering;
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> pinv;
    ordering(k, pinv);
    perm_ = pinv.inverse();
    sign_.assign(n_, 1);
    for (int i = 0; i < n_; ++i) sign_[perm_.indices()(i)] = pivot_sign[i];

    const SparseMatrix upper = permuted_upper(k);
    // Elimination tree and column counts of L.
    parent_.assign(n_, -1);
    std::vector<int> visited(n_, -1);
    std::vector<int> counts(n_, 0);
    for (int col = 0; col < n_; ++col) {
      visited[col] = col;
      for (SparseMatrix::InnerIterator it(upper, col); it; ++it) {
        int i = static_cast<int>(it.row());
        if (i >= col) continue;
        while (visited[i] != col) {
          if (parent_[i] == -1) parent_[i] = col;
          ++counts[i];
          visited[i] = col;
          i = parent_[i];
        }
      }
    }
    lp_.assign(n_ + 1, 0);
    for (int i = 0; i < n_; ++i) lp_[i + 1] = lp_[i] + counts[i];
    li_.assign(lp_[n_], 0);
    lx_.assign(lp_[n_], 0.0);
    d_.assign(n_, 0.0);
    dinv_.assign(n_, 0.0);
  }

  void factorize(const SparseMatrix& k, double eps, double delta) {
    const SparseMatrix upper = permuted_upper(k);
    std::vector<double> y(n_, 0.0);
    std::vector<int> pattern(n_), stack(n_), next(lp_.begin(), lp_.end() - 1);
    std::vector<char> marked(n_, 0);
    for (int col = 0; col < n_; ++col) {
      int top = 0;
      d_[col] = 0.0;
      for (SparseMatrix::InnerIterator it(upper, col); it; ++it) {
        int i = static_cast<int>(it.row());
        if (i == col) {
          d_[col] = it.value();
          continue;
        }
        y[i] = it.value();
        int len = 0;
        while (i != -1 && i < col && !marked[i]) {
          marked[i] = 1;
          stack[len++] = i;
          i = parent_[i];
        }
        while (len > 0) pattern[top++] = stack[--len];
      }
      for (int t = top - 1; t >= 0; --t) {
        const int j = pattern[t];
        const double yj = y[j];
        for (int p = lp_[j]; p < next[j]; ++p) y[li_[p]] -= lx_[p] * yj;
        const double l = yj * dinv_[j];
        li_[next[j]] = col;
        lx_[next[j]] = l;
        ++next[j];
        d_[col] -= yj * l;
        y[j] = 0.0;
        marked[j] = 0;
      }
      if (sign_[col] * d_[col] <= eps) d_[col] = sign_[col] * delta;
      dinv_[col] = 1.0 / d_[col];
    }
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    Eigen::VectorXd x = perm_ * rhs;
    for (int i = 0; i < n_; ++i) {
      for (int p = lp_[i]; p < lp_[i + 1]; ++p) x(li_[p]) -= lx_[p] * x(i);
    }
    for (int i = 0; i < n_; ++i) x(i) *= dinv_[i];
    for (int i = n_ - 1; i >= 0; --i) {
      for (int p = lp_[i]; p < lp_[i + 1]; ++p) x(i) -= lx_[p] * x(li_[p]);
    }
    return perm_.inverse() * x;
  }

 private:
  SparseMatrix permuted_upper(const SparseMatrix& k) const {
    SparseMatrix upper(n_, n_);
    upper.selfadjointView<Eigen::Upper>() = k.selfadjointView<Eigen::Lower>().twistedBy(perm_);
    return upper;
  }

  int n_{0};
  Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> perm_;
  std::vector<int> sign_, parent_, lp_, li_;
  std::vector<double> lx_, d_, dinv_;
};

// Newton system on the reduced KKT matrix
//   [P + G' D G   A'] [dz]   [rz]
//   [A            0 ] [dy] = [ry]
// factored with regularization and corrected by iterative refinement against
// the unregularized operator.
class KktSystem {
 public:
  KktSystem(const ScaledProblem& sp, const QpSettings& settings)
      : sp_(sp), settings_(settings), n_(sp.q.size()), me_(sp.b.size()) {
    const Eigen::Index dim = n_ + me_;
    std::vector<Eigen::Triplet<double>> base;
    base.reserve(sp.P.nonZeros() + 2 * sp.A.nonZeros() + dim);
    for (int k = 0; k < sp.P.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(sp.P, k); it; ++it) {
        base.emplace_back(it.row(), it.col(), it.value());
      }
    }
    for (int k = 0; k < sp.A.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(sp.A, k); it; ++it) {
        base.emplace_back(n_ + it.row(), it.col(), it.value());
        base.emplace_back(it.col(), n_ + it.row(), it.value());
      }
    }
    for (Eigen::Index i = 0; i < n_; ++i) base.emplace_back(i, i, settings.regularization);
    for (Eigen::Index i = 0; i < me_; ++i) base.emplace_back(n_ + i, n_ + i, -settings.regularization);
    base_.resize(dim, dim);
    base_.setFromTriplets(base.begin(), base.end());

    std::vector<Eigen::Triplet<double>> ext;
    ext.reserve(sp.G.nonZeros());
    for (int k = 0; k < sp.G.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(sp.G, k); it; ++it) ext.emplace_back(it.row(), it.col(), it.value());
    }
    g_ext_.resize(sp.G.rows(), dim);
    g_ext_.setFromTriplets(ext.begin(), ext.end());
    g_ext_t_ = g_ext_.transpose();

    signs_.assign(dim, 1);
    for (Eigen::Index i = n_; i < dim; ++i) signs_[i] = -1;
  }

  bool factor(const VectorXd& d) {
    d_ = d;
    if (!d.allFinite()) return false;
    const SparseMatrix k = base_ + SparseMatrix(g_ext_t_ * d.asDiagonal() * g_ext_);
    if (!analyzed_) {
      ldl_.analyze(k, signs_);
      analyzed_ = true;
    }
    ldl_.factorize(k, 1e-13, settings_.dynamic_regularization);
    return true;
  }

  void solve(const VectorXd& rz, const VectorXd& ry, VectorXd& dz, VectorXd& dy) const {
    VectorXd rhs(n_ + me_);
    rhs << rz, ry;
    VectorXd sol = ldl_.solve(rhs);
    for (int i = 0; i < settings_.refinement_steps; ++i) {
      const VectorXd residual = rhs - apply(sol);
      if (inf_norm(residual) <= 1e-14 * (1.0 + inf_norm(rhs))) break;
      sol += ldl_.solve(residual);
    }
    dz = sol.head(n_);
    dy = sol.tail(me_);
  }

 private:
  VectorXd apply(const VectorXd& v) const {
    const auto vz = v.head(n_);
    const auto vy = v.tail(me_);
    VectorXd out(n_ + me_);
    out.head(n_) = sp_.P * vz + sp_.At * vy + sp_.Gt * d_.cwiseProduct(sp_.G * vz);
    out.tail(me_) = sp_.A * vz;
    return out;
  }

  const ScaledProblem& sp_;
  const QpSettings& settings_;
  Eigen::Index n_, me_;
  SparseMatrix base_, g_ext_, g_ext_t_;
  VectorXd d_;
  std::vector<int> signs_;
  QuasiDefiniteLdl ldl_;
  bool analyzed_{false};
};

}  // namespace

KktResiduals kkt_residuals(const QpProblem& p, const VectorXd& z, const VectorXd& y, const VectorXd& lambda) {
  KktResiduals r;
  const VectorXd pz = p.P * z;
  const VectorXd aty = p.A.transpose() * y;
  const VectorXd gtl = p.G.transpose() * lambda;
  const VectorXd grad = pz + p.q + aty + gtl;
  r.stationarity =
      inf_norm(grad) / (1.0 + std::max({inf_norm(pz), inf_norm(p.q), inf_norm(aty), inf_norm(gtl)}));

  const VectorXd az = p.A * z;
  r.primal_equality = inf_norm(az - p.b) / (1.0 + std::max(inf_norm(az), inf_norm(p.b)));

  const VectorXd gz = p.G * z;
  const VectorXd slack = p.h - gz;
  r.primal_inequality = inf_norm((-slack).cwiseMax(0.0)) / (1.0 + std::max(inf_norm(gz), inf_norm(p.h)));

  const double obj = std::abs(p.objective(z));
  double comp = 0.0;
  double neg = 0.0;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    comp = std::max(comp, std::abs(lambda(i) * slack(i)));
    neg = std::max(neg, -lambda(i));
  }
  r.complementarity = comp / (1.0 + obj);
  r.dual_sign = neg / (1.0 + inf_norm(lambda));
  return r;
}

QpSolution solve_qp(const QpProblem& problem, const QpSettings& settings, const std::optional<QpWarmStart>& warm) {
  problem.validate();
  const ScaledProblem sp = equilibrate(problem);
  const Eigen::Index n = sp.q.size();
  const Eigen::Index me = sp.b.size();
  const Eigen::Index mi = sp.h.size();

  KktSystem kkt(sp, settings);
  VectorXd z(n), y(me), lam(mi), s(mi);
  VectorXd dz, dy;

  auto unscaled_y = [&](const VectorXd& ys) -> VectorXd {
    return sp.row_scale_a.cwiseProduct(ys) / sp.cost_scale;
  };
  auto unscaled_lambda = [&](const VectorXd& ls) -> VectorXd {
    return sp.row_scale_g.cwiseProduct(ls) / sp.cost_scale;
  };

  QpSolution result;
  result.status = QpStatus::NumericalError;

  const bool use_warm = warm && warm->z.size() == n && warm->y.size() == me && warm->lambda.size() == mi;
  if (use_warm) {
    // Interior floor for the warm multipliers and slacks.
    constexpr double kFloor = 1e-3;
    z = warm->z;
    y = sp.cost_scale * warm->y.cwiseQuotient(sp.row_scale_a);
    lam = (sp.cost_scale * warm->lambda.cwiseQuotient(sp.row_scale_g)).cwiseMax(kFloor);
    s = (sp.h - sp.G * z).cwiseMax(kFloor);
  } else {
    // Least-squares start: min 1/2 z'Pz + q'z + 1/2 |Gz - h|^2 s.t. Az = b.
    if (!kkt.factor(VectorXd::Ones(mi))) return result;
    kkt.solve(-sp.q + sp.Gt * sp.h, sp.b, z, y);
    const VectorXd s0 = sp.h - sp.G * z;
    s = s0;
    lam = -s0;
    if (mi > 0) {
      const double shift_s = -s0.minCoeff();
      if (shift_s >= 0.0) s.array() += 1.0 + shift_s;
      const double shift_l = -lam.minCoeff();
      if (shift_l >= 0.0) lam.array() += 1.0 + shift_l;
    }
  }

  double best_merit = std::numeric_limits<double>::infinity();
  VectorXd best_z = z, best_y = y, best_lam = lam;

  int it = 0;
  for (;; ++it) {
    const VectorXd y_orig = unscaled_y(y);
    const VectorXd lam_orig = unscaled_lambda(lam);
    const KktResiduals res = kkt_residuals(problem, z, y_orig, lam_orig);
    const double merit = res.max();
    if (std::isfinite(merit) && merit < best_merit) {
      best_merit = merit;
      best_z = z;
      best_y = y;
      best_lam = lam;
    }
    if (merit <= settings.tol) {
      result.status = QpStatus::Solved;
      break;
    }
    if (!std::isfinite(merit)) {
      result.status = QpStatus::NumericalError;
      break;
    }
    if (inf_norm(lam) > 1e12) {
      result.status = QpStatus::PrimalInfeasible;
      break;
    }
    if (inf_norm(z) > 1e12) {
      result.status = QpStatus::DualInfeasible;
      break;
    }
    if (it >= settings.max_iterations) {
      result.status = QpStatus::MaxIterations;
      break;
    }

    const VectorXd r_d = sp.P * z + sp.q + sp.At * y + sp.Gt * lam;
    const VectorXd r_p = sp.A * z - sp.b;
    const VectorXd r_g = sp.G * z + s - sp.h;
    const double mu = mi > 0 ? s.dot(lam) / static_cast<double>(mi) : 0.0;

    const VectorXd d = lam.cwiseQuotient(s);
    if (!kkt.factor(d)) {
      result.status = QpStatus::NumericalError;
      break;
    }

    // Given a complementarity target r_c, recover the full Newton direction.
    auto direction = [&](const VectorXd& r_c, VectorXd& dz_out, VectorXd& dy_out, VectorXd& dl_out,
                         VectorXd& ds_out) {
      const VectorXd rc_over_s = r_c.cwiseQuotient(s);
      kkt.solve(-r_d - sp.Gt * (d.cwiseProduct(r_g) - rc_over_s), -r_p, dz_out, dy_out);
      dl_out = d.cwiseProduct(sp.G * dz_out + r_g) - rc_over_s;
      ds_out = -(r_c + s.cwiseProduct(dl_out)).cwiseQuotient(lam);
    };

    VectorXd dl, ds;
    const VectorXd rc_aff = lam.cwiseProduct(s);
    direction(rc_aff, dz, dy, dl, ds);
    const double alpha_aff = std::min(max_step(s, ds), max_step(lam, dl));

    double sigma = 0.0;
    VectorXd rc = rc_aff;
    if (mi > 0) {
      const double mu_aff = (s + alpha_aff * ds).dot(lam + alpha_aff * dl) / static_cast<double>(mi);
      sigma = std::pow(std::clamp(mu_aff / mu, 0.0, 1.0), 3);
      rc = rc_aff + ds.cwiseProduct(dl) - VectorXd::Constant(mi, sigma * mu);
      direction(rc, dz, dy, dl, ds);
    }

    const double alpha_max = std::min(max_step(s, ds), max_step(lam, dl));
    const double alpha = std::min(1.0, 0.995 * alpha_max);
    z += alpha * dz;
    y += alpha * dy;
    lam += alpha * dl;
    s += alpha * ds;
  }

  if (result.status != QpStatus::Solved) {
    z = best_z;
    y = best_y;
    lam = best_lam;
    const bool stalled = result.status == QpStatus::NumericalError || result.status == QpStatus::MaxIterations;
    if (stalled && best_merit <= settings.acceptable_tol) result.status = QpStatus::Solved;
  }
  result.z = z;
  result.y = unscaled_y(y);
  result.lambda = unscaled_lambda(lam);
  result.objective = problem.objective(z);
  result.iterations = it;
  result.residuals = kkt_residuals(problem, result.z, result.y, result.lambda);
  return result;
}

}  // namespace cmpc
