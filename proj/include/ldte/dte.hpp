#ifndef LDTE_DTE_HPP
#define LDTE_DTE_HPP

#include <array>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "ldte/core.hpp"
#include "ldte/nmf.hpp"

namespace ldte {

/// First-step nuisances: inverse mixture weights, the latent distribution and
/// the (D, Z) cell probabilities.
struct NuisanceSet {
  int k = 0;
  std::array<Eigen::MatrixXd, 2> lambda_tilde;  // [d](j, k): entries of inverse(Lambda_d)
  Eigen::VectorXd p_u;                          // K
  Eigen::VectorXd p_dz;                         // 2K, the d = 0 block first

  double p(int d, int j) const { return p_dz[d * k + j]; }
  Eigen::Index size() const { return 2 * k * k + 3 * k; }

  /// Stacking: lambda_tilde(j, k, d) at k*2K + d*K + j, then p_u, then p_dz.
  static Eigen::Index lt_index(int j, int kk, int d, int k) { return kk * 2 * k + d * k + j; }
  Eigen::Index pu_index(int kk) const { return 2 * k * k + kk; }
  Eigen::Index pdz_index(int d, int j) const { return 2 * k * k + k + d * k + j; }

  Eigen::VectorXd vectorize() const;
  static NuisanceSet from_vector(const Eigen::VectorXd& v, int k);
};

/// Inverse of a mixture-weight matrix. Throws RankDeficiency when
/// sigma_max / sigma_min exceeds `cond_cap`.
Eigen::MatrixXd invert_weights(const CondProbMatrix& lambda, double cond_cap = 1e8);

/// p_u = Lambda_0 p_dz[d=0] + Lambda_1 p_dz[d=1].
Eigen::VectorXd marginal_u(const Eigen::MatrixXd& lambda0, const Eigen::MatrixXd& lambda1,
                           const Eigen::VectorXd& p_dz);

/// Empirical (or population) P(D = d, Z = z_j), d-major. Throws InsufficientSupport on an empty cell.
Eigen::VectorXd cell_p_dz(const CellTable& table);

NuisanceSet make_nuisance(const CondProbMatrix& lambda0, const CondProbMatrix& lambda1, const CellTable& table,
                          double cond_cap = 1e8);
NuisanceSet make_nuisance(const MixtureFit& fit, const CellTable& table, double cond_cap = 1e8);

struct Target {
  enum class Kind { marginal, joint };
  Kind kind = Kind::marginal;
  double delta = 0.0;  // marginal: P(Y(1) - Y(0) <= delta)
  double y0 = 0.0;     // joint: P(Y(0) <= y0, Y(1) <= y1)
  double y1 = 0.0;

  static Target marginal_at(double delta);
  static Target joint_at(double y0, double y1);
};

enum class VarianceConvention {
  projection,  // se = sigma / sqrt(n), sigma^2 = E[psi_1^2]
  hoeffding,   // se = 2 sigma / sqrt(n), the order-2 U-statistic projection variance
};

struct DteOptions {
  VarianceConvention variance = VarianceConvention::hoeffding;
  double cond_cap = 1e8;
  double z_crit = 1.959963984540054;
};

struct DteEstimate {
  Target target;
  double theta = 0.0;  // unclamped
  double theta_clamped = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double sigma2 = 0.0;  // mean squared projection of the orthogonal score
  bool degraded = false;  // Jacobian rank-deficient, multiplier ridge-regularized
  Eigen::VectorXd mu;
};

struct BoundsEstimate {
  double delta = 0.0;
  double lower = 0.0;
  double upper = 1.0;
};

/// Index map of the orthogonalization moments: phi_A (conditional
/// independence), phi_B (iterated expectations), phi_C (cell probabilities).
struct PhiLayout {
  CellShape shape;
  Eigen::Index a(int y, int x, int d, int k) const {
    return static_cast<Eigen::Index>(k) * 2 * shape.m() + d * shape.m() + shape.row(y, x);
  }
  Eigen::Index b(int d, int x) const { return 2 * shape.m() * shape.k + d * shape.m_x + x; }
  Eigen::Index c(int d, int j) const { return 2 * shape.m() * shape.k + 2 * shape.m_x + d * shape.k + j; }
  Eigen::Index size() const { return 2 * shape.m() * shape.k + 2 * shape.m_x + 2 * shape.k; }
};

/// Symmetrized pair score phi(w_a, w_b), every coordinate written out.
Eigen::VectorXd build_phi(const Cell& a, const Cell& b, const CellShape& shape, const NuisanceSet& eta);

/// A scalar functional of the nuisances estimated by a symmetric pair kernel.
/// The kernel excludes theta; the estimating equation is kernel - theta = 0.
class PairFunctional {
 public:
  virtual ~PairFunctional() = default;
  virtual double kernel(const Cell& a, const Cell& b) const = 0;
  /// Pair mean of the kernel under `table` (U-statistic or population expectation).
  virtual double mean(const CellTable& table) const = 0;
  /// Derivative of `mean` with respect to the stacked nuisance vector.
  virtual Eigen::VectorXd gradient(const CellTable& table) const = 0;
};

/// DTE targets: Y cells are scored by `y_scores` (one per cell).
std::unique_ptr<PairFunctional> make_target_functional(const Target& target, const std::vector<double>& y_scores,
                                                       const NuisanceSet& eta);
/// sum over terms of coef * Gamma_X^{(d)}[x, k].
struct GammaXTerm {
  int d = 0;
  int x = 0;
  int k = 0;
  double coef = 1.0;
};
std::unique_ptr<PairFunctional> make_gamma_x_functional(std::vector<GammaXTerm> terms, const NuisanceSet& eta);

/// Closed-form pair mean of phi.
Eigen::VectorXd phi_mean(const CellTable& table, const NuisanceSet& eta);
/// d E[phi] / d eta, one row per nuisance coordinate and one column per phi coordinate.
Eigen::MatrixXd phi_jacobian(const CellTable& table, const NuisanceSet& eta);

struct Jacobians {
  Eigen::MatrixXd dphi;
  Eigen::VectorXd dm;
};
Jacobians build_jacobians(const CellTable& table, const NuisanceSet& eta, const PairFunctional& m);

struct MuResult {
  Eigen::VectorXd mu;
  bool degraded = false;
};
/// mu = dphi' (dphi dphi')^{-1} dm; ridge 1e-10 * trace when dphi lacks full row rank.
MuResult compute_mu(const Eigen::MatrixXd& dphi, const Eigen::VectorXd& dm);

/// Pair mean of a symmetric kernel h over the support of `table`, with the
/// projections psi_1(a) = E[h(a, W)] - theta per support cell.
struct PairAggregate {
  std::vector<int> support;
  Eigen::VectorXd weight;  // P(cell) on the support
  Eigen::MatrixXd theta;   // 1 x T
  Eigen::MatrixXd psi1;    // |support| x T, centred
  Eigen::MatrixXd sigma;   // T x T, sum over cells of weight * psi1 psi1'
};

/// `kernels(a, b)` returns one value per target.
template <typename F>
PairAggregate aggregate_pairs(const CellTable& table, int targets, F&& kernels);

/// mu' phi(a, b) in O(K) per pair.
class OrthogonalScore {
 public:
  OrthogonalScore(const CellShape& shape, const NuisanceSet& eta, const Eigen::VectorXd& mu);
  double correction(const Cell& a, const Cell& b) const;

 private:
  double linear(const Cell& a) const;
  CellShape shape_;
  const NuisanceSet* eta_;
  Eigen::VectorXd mu_;
  std::array<Eigen::MatrixXd, 2> alpha_;
  double constant_ = 0.0;
};

/// Joint orthogonalized estimate of several functionals sharing one phi.
struct OrthogonalEstimate {
  Eigen::VectorXd theta;
  Eigen::MatrixXd sigma;  // E[psi_1 psi_1']
  std::vector<Eigen::VectorXd> mu;
  bool degraded = false;
};
OrthogonalEstimate orthogonal_estimate(const CellTable& table, const NuisanceSet& eta,
                                       const std::vector<const PairFunctional*>& functionals);

double standard_error(double sigma2, double n, VarianceConvention convention);

DteEstimate estimate_theta(const CellTable& table, const NuisanceSet& eta, const Target& target,
                           const DteOptions& options = {});
DteEstimate estimate_theta(const CellTable& table, const MixtureFit& fit, const Target& target,
                           const DteOptions& options = {});
std::vector<DteEstimate> estimate_grid(const CellTable& table, const NuisanceSet& eta,
                                       const std::vector<Target>& targets, const DteOptions& options = {});

/// The same theta and sigma^2 from an explicit double loop over units.
struct LiteralEstimate {
  double theta = 0.0;
  double sigma2 = 0.0;
};
LiteralEstimate literal_u_statistic(const DiscreteDataset& data, const NuisanceSet& eta, const Target& target,
                                    const Eigen::VectorXd& mu);

/// a <= b up to a 1e-12 relative slack, so that score arithmetic such as
/// (s + delta) - delta compares as intended.
bool score_leq(double a, double b);

/// P(Y <= score_y | D = d) for every Y cell.
Eigen::VectorXd arm_cdf(const CellTable& table, int d);

/// Makarov bounds on P(Y(1) - Y(0) <= delta) from the two margins on a common score grid.
BoundsEstimate makarov_bounds(const std::vector<double>& scores, const Eigen::VectorXd& cdf1,
                              const Eigen::VectorXd& cdf0, double delta);

// ---------------------------------------------------------------------------

template <typename F>
PairAggregate aggregate_pairs(const CellTable& table, int targets, F&& kernels) {
  PairAggregate out;
  out.support = table.support();
  const auto s = static_cast<Eigen::Index>(out.support.size());
  out.weight.resize(s);
  for (Eigen::Index i = 0; i < s; ++i) out.weight[i] = table.prob(out.support[i]);

  std::vector<Cell> cells;
  cells.reserve(out.support.size());
  for (int idx : out.support) cells.push_back(cell_at(table.shape, idx));

  // row sums r(a) = sum_b w_b h(a, b) and diagonals h(a, a)
  Eigen::MatrixXd row(s, targets);
  Eigen::MatrixXd diag(s, targets);
  row.setZero();
  for (Eigen::Index i = 0; i < s; ++i) {
    for (Eigen::Index j = i; j < s; ++j) {
      const Eigen::VectorXd h = kernels(cells[i], cells[j]);
      row.row(i) += out.weight[j] * h.transpose();
      if (j != i) {
        row.row(j) += out.weight[i] * h.transpose();
      } else {
        diag.row(i) = h.transpose();
      }
    }
  }
  if (table.population) {
    out.theta = out.weight.transpose() * row;
    out.psi1 = row.rowwise() - out.theta.row(0);
  } else {
    const double n = table.n;
    // counts N_a = n w_a; ordered pairs of distinct units
    out.theta = (n * n * (out.weight.transpose() * row) - n * (out.weight.transpose() * diag)) / (n * (n - 1.0));
    out.psi1 = ((n * row - diag) / (n - 1.0)).rowwise() - out.theta.row(0);
  }
  out.sigma = out.psi1.transpose() * out.weight.asDiagonal() * out.psi1;
  return out;
}

}  // namespace ldte

#endif  // LDTE_DTE_HPP
