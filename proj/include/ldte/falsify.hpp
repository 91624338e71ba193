#ifndef LDTE_FALSIFY_HPP
#define LDTE_FALSIFY_HPP

#include <vector>

#include <Eigen/Dense>

#include "ldte/core.hpp"
#include "ldte/dte.hpp"
#include "ldte/nmf.hpp"

namespace ldte {

struct FalsifyConfig {
  NmfConfig nmf;
  VarianceConvention variance = VarianceConvention::hoeffding;
  double cond_cap = 1e8;
  // eigenvalues of Avar below rank_tol * largest count as zero
  double rank_tol = 1e-9;
};

struct SplitFit {
  SingleArmFit untreated;
  SingleArmFit treated;
};

/// Separate single-arm factorizations of H_0 and H_1, each aligned by its own
/// outcome conditional mean.
SplitFit split_fit(const CellTable& table, const NmfConfig& config);

struct LabelMatch {
  std::vector<int> permutation;  // untreated column matched to treated column k
  double criterion = 0.0;
};

/// Exhaustive search over all K! permutations; K <= 8.
LabelMatch match_labels(const Eigen::MatrixXd& gamma_x_treated, const Eigen::MatrixXd& gamma_x_untreated);

struct FalsificationResult {
  Eigen::VectorXd w;  // Gamma_X^(1)[x, k] - Gamma_X^(0)[x, pi(k)] at k * M_X + x
  double t_stat = 0.0;
  int df = 0;
  int full_df = 0;  // length of w; df < full_df when Avar is rank-deficient
  double p_value = 1.0;
  std::vector<int> permutation;
  bool degraded = false;
  Eigen::MatrixXd avar;
};

FalsificationResult falsification_test(const CellTable& table, const FalsifyConfig& config);

/// Regularized upper incomplete gamma Q(a, x).
double regularized_gamma_q(double a, double x);
/// P(chi2_df > x).
double chi2_sf(double x, double df);

}  // namespace ldte

#endif  // LDTE_FALSIFY_HPP
