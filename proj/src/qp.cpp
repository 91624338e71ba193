#include "ldte/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ldte/error.hpp"

namespace ldte {

const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal:
      return "optimal";
    case QpStatus::infeasible:
      return "infeasible";
    case QpStatus::max_iter:
      return "max_iter";
  }
  return "unknown";
}

void validate(const QpProblem& p) {
  const Eigen::Index n = p.c.size();
  if (n == 0) throw ConfigError("QP has no variables");
  if (p.Q.rows() != n || p.Q.cols() != n) throw ConfigError("QP: Q must be n x n with n = size(c)");
  if (p.A_eq.size() > 0 && p.A_eq.cols() != n) throw ConfigError("QP: A_eq has the wrong column count");
  if (p.A_eq.rows() != p.b_eq.size()) throw ConfigError("QP: A_eq and b_eq disagree");
  if (p.A_in.size() > 0 && p.A_in.cols() != n) throw ConfigError("QP: A_in has the wrong column count");
  if (p.A_in.rows() != p.b_in.size()) throw ConfigError("QP: A_in and b_in disagree");
  const double scale = std::max(1.0, p.Q.cwiseAbs().maxCoeff());
  if ((p.Q - p.Q.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) throw ConfigError("QP: Q is not symmetric");
}

namespace {

// Internal form: every constraint is n_i'x >= b_i (or = b_i), stacked [eq, in, nonneg].
struct Constraints {
  Eigen::MatrixXd normals;  // n x m
  Eigen::VectorXd rhs;
  std::vector<bool> equality;
  Eigen::Index m_eq = 0;
  Eigen::Index m_in = 0;

  Eigen::Index size() const { return rhs.size(); }
  double slack(Eigen::Index i, const Eigen::VectorXd& x) const { return normals.col(i).dot(x) - rhs[i]; }
};

Constraints stack(const QpProblem& p) {
  const Eigen::Index n = p.dim();
  Constraints k;
  k.m_eq = p.A_eq.rows();
  k.m_in = p.A_in.rows();
  const Eigen::Index m = k.m_eq + k.m_in + (p.nonneg ? n : 0);
  k.normals.setZero(n, m);
  k.rhs.setZero(m);
  k.equality.assign(m, false);
  for (Eigen::Index i = 0; i < k.m_eq; ++i) {
    k.normals.col(i) = p.A_eq.row(i).transpose();
    k.rhs[i] = p.b_eq[i];
    k.equality[i] = true;
  }
  for (Eigen::Index i = 0; i < k.m_in; ++i) {
    k.normals.col(k.m_eq + i) = -p.A_in.row(i).transpose();
    k.rhs[k.m_eq + i] = -p.b_in[i];
  }
  if (p.nonneg) {
    for (Eigen::Index i = 0; i < n; ++i) k.normals(i, k.m_eq + k.m_in + i) = 1.0;
  }
  return k;
}

// Internal multipliers u (Qx + c = sum u_i n_i) to the external convention.
Eigen::VectorXd to_external(const Constraints& k, const Eigen::VectorXd& u) {
  Eigen::VectorXd y = u;
  y.head(k.m_eq) = -u.head(k.m_eq);
  return y;
}

struct Step {
  Eigen::VectorXd z;  // primal direction
  Eigen::VectorXd r;  // change of active multipliers per unit step
  double curvature = 0.0;  // z'n_p
  bool null = false;
};

class Solver {
 public:
  Solver(const QpProblem& p, const Constraints& k, const Eigen::LLT<Eigen::MatrixXd>& llt)
      : p_(p), k_(k), L_(llt.matrixL()) {}

  Step direction(const std::vector<Eigen::Index>& active, const std::vector<double>& sign, Eigen::Index pidx,
                 double psign) const {
    const Eigen::Index n = p_.dim();
    const Eigen::VectorXd np = psign * k_.normals.col(pidx);
    const Eigen::VectorXd v = L_.triangularView<Eigen::Lower>().solve(np);
    Step s;
    Eigen::VectorXd w = v;
    if (!active.empty()) {
      Eigen::MatrixXd N(n, static_cast<Eigen::Index>(active.size()));
      for (std::size_t j = 0; j < active.size(); ++j) N.col(j) = sign[j] * k_.normals.col(active[j]);
      const Eigen::MatrixXd J = L_.triangularView<Eigen::Lower>().solve(N);
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(J);
      qr.setThreshold(1e-12);
      s.r = qr.solve(v);
      w -= J * s.r;
    }
    s.curvature = w.squaredNorm();
    // relative, so that the test does not depend on the scale of Q
    s.null = w.norm() <= 1e-10 * v.norm();
    s.z = L_.transpose().triangularView<Eigen::Upper>().solve(w);
    return s;
  }

 private:
  const QpProblem& p_;
  const Constraints& k_;
  Eigen::MatrixXd L_;
};

// Violations below this are treated as satisfied; 1e-11 relative at the default tol.
double violation_tol(const Constraints& k, Eigen::Index i, const Eigen::VectorXd& x, double tol) {
  const double scale =
      std::max({1.0, std::abs(k.rhs[i]), k.normals.col(i).lpNorm<1>() * x.lpNorm<Eigen::Infinity>()});
  return 1e-2 * tol * scale;
}

QpSolution infeasible(const QpProblem& p, const Constraints& k, const Eigen::VectorXd& x,
                      const std::vector<Eigen::Index>& active, const std::vector<double>& sign, const Step& step,
                      Eigen::Index pidx, double psign, int iterations) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(k.size());
  y[pidx] = psign;
  for (std::size_t j = 0; j < active.size(); ++j) y[active[j]] -= sign[j] * step.r[static_cast<Eigen::Index>(j)];
  QpSolution out;
  out.x = x;
  out.objective = p.objective(x);
  out.iterations = iterations;
  out.status = QpStatus::infeasible;
  out.certificate = to_external(k, y);
  out.multipliers = Eigen::VectorXd::Zero(k.size());
  out.kkt_residual = kkt_residual(p, x, out.multipliers);
  return out;
}

// Minimum-norm KKT solve with the unregularized Q on the working set.
bool polish(const QpProblem& p, const Constraints& k, const std::vector<Eigen::Index>& active,
            const std::vector<double>& sign, Eigen::VectorXd& x, Eigen::VectorXd& u) {
  const Eigen::Index n = p.dim();
  const auto q = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + q, n + q);
  Eigen::VectorXd rhs(n + q);
  K.topLeftCorner(n, n) = p.Q;
  rhs.head(n) = -p.c;
  for (Eigen::Index j = 0; j < q; ++j) {
    const Eigen::VectorXd nj = sign[j] * k.normals.col(active[j]);
    K.block(0, n + j, n, 1) = -nj;
    K.block(n + j, 0, 1, n) = nj.transpose();
    rhs[n + j] = sign[j] * k.rhs[active[j]];
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(K);
  const Eigen::VectorXd sol = cod.solve(rhs);
  if (!sol.allFinite()) return false;
  x = sol.head(n);
  u = Eigen::VectorXd::Zero(k.size());
  for (Eigen::Index j = 0; j < q; ++j) u[active[j]] = sign[j] * sol[n + j];
  return true;
}

}  // namespace

double kkt_residual(const QpProblem& p, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const Eigen::Index n = p.dim();
  const Eigen::Index me = p.A_eq.rows();
  const Eigen::Index mi = p.A_in.rows();
  Eigen::VectorXd grad = p.Q * x + p.c;
  double primal = 0.0;
  double dual = 0.0;
  double comp = 0.0;
  if (me > 0) {
    grad += p.A_eq.transpose() * y.head(me);
    primal = std::max(primal, (p.A_eq * x - p.b_eq).lpNorm<Eigen::Infinity>());
  }
  if (mi > 0) {
    const Eigen::VectorXd yi = y.segment(me, mi);
    grad += p.A_in.transpose() * yi;
    const Eigen::VectorXd slack = p.b_in - p.A_in * x;
    primal = std::max(primal, (-slack).maxCoeff());
    dual = std::max(dual, (-yi).maxCoeff());
    comp = std::max(comp, yi.cwiseProduct(slack).lpNorm<Eigen::Infinity>());
  }
  if (p.nonneg) {
    const Eigen::VectorXd yn = y.segment(me + mi, n);
    grad -= yn;
    primal = std::max(primal, (-x).maxCoeff());
    dual = std::max(dual, (-yn).maxCoeff());
    comp = std::max(comp, yn.cwiseProduct(x).lpNorm<Eigen::Infinity>());
  }
  return std::max({grad.lpNorm<Eigen::Infinity>(), primal, dual, comp, 0.0});
}

namespace {

QpSolution solve_normalized(const QpProblem& p, double tol, int max_iter) {
  const Constraints k = stack(p);
  const double inf = std::numeric_limits<double>::infinity();

  const double ridge = 1e-12 * std::max(1.0, p.Q.diagonal().cwiseAbs().maxCoeff());
  Eigen::MatrixXd Qr = p.Q;
  Qr.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(Qr);
  if (llt.info() != Eigen::Success) throw ConfigError("QP: Q is not positive semidefinite");
  const Solver solver(p, k, llt);

  Eigen::VectorXd x = -llt.solve(p.c);
  std::vector<Eigen::Index> active;
  std::vector<double> sign;  // orientation of each active normal
  Eigen::VectorXd u = Eigen::VectorXd::Zero(0);
  int iterations = 0;

  auto drop = [&](std::size_t pos) {
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(pos));
    sign.erase(sign.begin() + static_cast<std::ptrdiff_t>(pos));
    Eigen::VectorXd nu(u.size() - 1);
    nu << u.head(static_cast<Eigen::Index>(pos)), u.tail(u.size() - static_cast<Eigen::Index>(pos) - 1);
    u = nu;
  };
  auto add = [&](Eigen::Index idx, double sgn, double mult) {
    active.push_back(idx);
    sign.push_back(sgn);
    u.conservativeResize(u.size() + 1);
    u[u.size() - 1] = mult;
  };

  // Equalities first; their multipliers are free so they are never dropped.
  for (Eigen::Index i = 0; i < k.m_eq; ++i) {
    ++iterations;
    double s = k.slack(i, x);
    const double sgn = s > 0.0 ? -1.0 : 1.0;
    s *= sgn;
    const Step st = solver.direction(active, sign, i, sgn);
    if (st.null) {
      if (-s <= violation_tol(k, i, x, tol)) continue;  // redundant
      return infeasible(p, k, x, active, sign, st, i, sgn, iterations);
    }
    const double t = -s / st.curvature;
    x += t * st.z;
    if (!active.empty()) u -= t * st.r;
    add(i, sgn, t);
  }

  QpStatus status = QpStatus::optimal;
  while (true) {
    Eigen::Index pidx = -1;
    double worst = 0.0;
    for (Eigen::Index i = k.m_eq; i < k.size(); ++i) {
      if (std::find(active.begin(), active.end(), i) != active.end()) continue;
      const double s = k.slack(i, x);
      if (s >= -violation_tol(k, i, x, tol)) continue;
      const double scaled = s / std::max(1e-300, k.normals.col(i).norm());
      if (scaled < worst) {
        worst = scaled;
        pidx = i;
      }
    }
    if (pidx < 0) break;

    double up = 0.0;
    bool added = false;
    while (!added) {
      if (++iterations > max_iter) {
        status = QpStatus::max_iter;
        break;
      }
      const Step st = solver.direction(active, sign, pidx, 1.0);
      double t1 = inf;
      std::size_t l = 0;
      for (std::size_t j = 0; j < active.size(); ++j) {
        if (k.equality[active[j]]) continue;
        const double rj = st.r[static_cast<Eigen::Index>(j)];
        if (rj > 1e-14) {
          const double ratio = u[static_cast<Eigen::Index>(j)] / rj;
          if (ratio < t1) {
            t1 = ratio;
            l = j;
          }
        }
      }
      const double sp = k.slack(pidx, x);
      const double t2 = st.null ? inf : -sp / st.curvature;
      const double t = std::min(t1, t2);
      if (t == inf) return infeasible(p, k, x, active, sign, st, pidx, 1.0, iterations);
      if (t2 < inf) x += t * st.z;
      if (!active.empty()) u -= t * st.r;
      up += t;
      if (t2 <= t1) {
        add(pidx, 1.0, up);
        added = true;
      } else {
        drop(l);
      }
    }
    if (status != QpStatus::optimal) break;
  }

  QpSolution out;
  out.iterations = iterations;
  out.status = status;
  Eigen::VectorXd ufull = Eigen::VectorXd::Zero(k.size());
  for (std::size_t j = 0; j < active.size(); ++j) ufull[active[j]] = sign[j] * u[static_cast<Eigen::Index>(j)];
  for (Eigen::Index i = k.m_eq; i < k.size(); ++i) ufull[i] = std::max(ufull[i], 0.0);
  out.x = x;
  out.multipliers = to_external(k, ufull);
  out.kkt_residual = kkt_residual(p, x, out.multipliers);

  if (status == QpStatus::optimal) {
    Eigen::VectorXd xp;
    Eigen::VectorXd up;
    if (polish(p, k, active, sign, xp, up)) {
      const Eigen::VectorXd yp = to_external(k, up);
      const double res = kkt_residual(p, xp, yp);
      if (res <= out.kkt_residual) {
        out.x = xp;
        out.multipliers = yp;
        out.kkt_residual = res;
      }
    }
  }
  out.objective = p.objective(out.x);
  return out;
}

}  // namespace

QpSolution solve_qp(const QpProblem& p, double tol, int max_iter) {
  validate(p);
  // Dividing the objective by its curvature scale leaves the minimizer unchanged
  // and keeps the solver's absolute tolerances meaningful.
  const double scale = p.Q.diagonal().cwiseAbs().maxCoeff();
  if (!(scale > 0.0) || scale == 1.0) return solve_normalized(p, tol, max_iter);
  QpProblem q = p;
  q.Q /= scale;
  q.c /= scale;
  QpSolution out = solve_normalized(q, tol, max_iter);
  out.objective = p.objective(out.x);
  if (out.multipliers.size() > 0) out.multipliers *= scale;
  out.kkt_residual = kkt_residual(p, out.x, out.multipliers);
  return out;
}

}  // namespace ldte
