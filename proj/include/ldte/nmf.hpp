#ifndef LDTE_NMF_HPP
#define LDTE_NMF_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ldte/core.hpp"

namespace ldte {

struct NmfConfig {
  int k = 1;
  int restarts = 20;
  // A restart stops once a full cycle lowers the objective by less than
  // tol_objective times its current value, or the objective underflows.
  double tol_objective = 1e-10;
  int max_outer_iter = 5000;
  std::uint64_t seed = 0;
  // Restart 1 starts from clipped leading singular vectors of H_d.
  bool eigen_restart = false;
  int workers = 1;
  bool record_trace = false;
};

struct MixtureFit {
  CondProbMatrix gamma_x;   // M_X x K
  CondProbMatrix gamma_y0;  // M_Y x K
  CondProbMatrix gamma_y1;
  CondProbMatrix lambda0;  // K x K, rows u, columns z
  CondProbMatrix lambda1;
  double objective = 0.0;
  int restarts_used = 0;
  bool converged = false;
  int best_restart = 0;
  int outer_iterations = 0;
  // objective after every sub-step of the best restart (when requested)
  std::vector<double> trace;

  const CondProbMatrix& gamma_y(int d) const { return d == 0 ? gamma_y0 : gamma_y1; }
  const CondProbMatrix& lambda(int d) const { return d == 0 ? lambda0 : lambda1; }
};

// Column k is vec(gamma_y[:,k] gamma_x[:,k]') with rows (y, x) -> x * M_Y + y.
template <typename DX, typename DY>
Eigen::MatrixXd assemble_gamma(const Eigen::MatrixBase<DX>& gamma_x, const Eigen::MatrixBase<DY>& gamma_y) {
  if (gamma_x.cols() != gamma_y.cols()) throw ConfigError("assemble_gamma: K mismatch");
  const Eigen::Index my = gamma_y.rows();
  Eigen::MatrixXd out(my * gamma_x.rows(), gamma_x.cols());
  for (Eigen::Index k = 0; k < gamma_x.cols(); ++k) {
    for (Eigen::Index x = 0; x < gamma_x.rows(); ++x) out.col(k).segment(x * my, my) = gamma_x(x, k) * gamma_y.col(k);
  }
  return out;
}

CondProbMatrix assemble_gamma(const CondProbMatrix& gamma_x, const CondProbMatrix& gamma_y);

// Squared Frobenius residual of one arm.
double arm_objective(const Eigen::MatrixXd& h, const Eigen::MatrixXd& gamma_x, const Eigen::MatrixXd& gamma_y,
                     const Eigen::MatrixXd& lambda);

struct InitialGuess {
  Eigen::MatrixXd gamma0;  // M x K
  Eigen::MatrixXd gamma1;
};

// Restart 0 copies the H_d columns, later restarts take Dirichlet(1) mixtures
// of them; the RNG stream is derived from (config.seed, restart).
InitialGuess initialize(const CondProbMatrix& h0, const CondProbMatrix& h1, const NmfConfig& config, int restart);

// x-marginal (M_X x K) and y-marginal (M_Y x K) of flattened columns.
Eigen::MatrixXd marginal_x(const Eigen::MatrixXd& gamma, int m_y);
Eigen::MatrixXd marginal_y(const Eigen::MatrixXd& gamma, int m_y);

// Alternating QP minimization of ||H0 - G0 L0||^2 + ||H1 - G1 L1||^2 over all restarts.
MixtureFit fit(const CondProbMatrix& h0, const CondProbMatrix& h1, int m_y, const NmfConfig& config);

// Permutation sorting columns by ascending E[score | U] under gamma_y0, ties by gamma_y1, then index.
std::vector<int> alignment_order(const MixtureFit& fit, const std::vector<double>& y_scores);
MixtureFit permute(const MixtureFit& fit, const std::vector<int>& order);
// Scores default to the cell indices 1..M_Y.
MixtureFit align(const MixtureFit& fit, const std::vector<double>& y_scores = {});

// One-arm variant used by the falsification test.
struct SingleArmFit {
  CondProbMatrix gamma_x;
  CondProbMatrix gamma_y;
  CondProbMatrix lambda;
  double objective = 0.0;
  bool converged = false;
  int best_restart = 0;
};

SingleArmFit fit_single_arm(const CondProbMatrix& h, int m_y, const NmfConfig& config);
// Sorts columns by ascending conditional mean of gamma_y.
SingleArmFit align(const SingleArmFit& fit, const std::vector<double>& y_scores = {});

}  // namespace ldte

#endif  // LDTE_NMF_HPP
