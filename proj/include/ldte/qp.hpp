#ifndef LDTE_QP_HPP
#define LDTE_QP_HPP

#include <Eigen/Dense>

namespace ldte {

// minimize 0.5 x'Qx + c'x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  x >= 0 (if nonneg)
struct QpProblem {
  Eigen::MatrixXd Q;
  Eigen::VectorXd c;
  Eigen::MatrixXd A_eq;
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd A_in;
  Eigen::VectorXd b_in;
  bool nonneg = false;

  Eigen::Index dim() const { return c.size(); }
  double objective(const Eigen::VectorXd& x) const { return 0.5 * x.dot(Q * x) + c.dot(x); }
};

enum class QpStatus { optimal, infeasible, max_iter };

const char* to_string(QpStatus s);

struct QpSolution {
  Eigen::VectorXd x;
  double objective = 0.0;
  // max of stationarity, primal infeasibility, dual infeasibility and complementarity
  double kkt_residual = 0.0;
  int iterations = 0;
  QpStatus status = QpStatus::optimal;
  // Lagrange multipliers stacked as [eq, in, nonneg]; inequality entries are >= 0
  // and Qx + c + A_eq'y_eq + A_in'y_in - y_nonneg = 0.
  Eigen::VectorXd multipliers;
  // On infeasibility: y >= 0 on the inequality part with A_eq'y_eq + A_in'y_in - y_nonneg = 0
  // and b_eq'y_eq + b_in'y_in < 0, stacked like `multipliers`.
  Eigen::VectorXd certificate;

  bool ok() const { return status == QpStatus::optimal; }
};

// Throws ConfigError on inconsistent dimensions or an asymmetric Q.
void validate(const QpProblem& problem);

// Dual active-set method (Goldfarb-Idnani) on a slightly regularized Q,
// followed by a minimum-norm KKT solve on the final working set with the
// original Q. Singular PSD Q is accepted.
QpSolution solve_qp(const QpProblem& problem, double tol = 1e-9, int max_iter = 10000);

// KKT residual of (x, multipliers) for `problem`, same convention as QpSolution.
double kkt_residual(const QpProblem& problem, const Eigen::VectorXd& x, const Eigen::VectorXd& multipliers);

}  // namespace ldte

#endif  // LDTE_QP_HPP
