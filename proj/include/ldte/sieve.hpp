#ifndef LDTE_SIEVE_HPP
#define LDTE_SIEVE_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ldte/core.hpp"
#include "ldte/dte.hpp"

namespace ldte {

/// Bernstein basis of degree p at t: entry j is C(p, j) t^j (1 - t)^(p - j).
/// Built by the de Casteljau recurrence, so no binomials are formed.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> bernstein_basis(int p, T t) {
  if (p < 0) throw ConfigError("Bernstein degree must be nonnegative");
  if (!(t >= T(0) && t <= T(1))) throw InputError("Bernstein argument outside [0, 1]");
  Eigen::Matrix<T, Eigen::Dynamic, 1> b = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(p + 1);
  b[0] = T(1);
  const T s = T(1) - t;
  for (int r = 1; r <= p; ++r) {
    for (int j = r; j >= 1; --j) b[j] = s * b[j] + t * b[j - 1];
    b[0] = s * b[0];
  }
  return b;
}

/// Gauss-Legendre nodes and weights on [0, 1]; exact for degree 2n - 1.
struct Quadrature {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};
Quadrature gauss_legendre(int n);

/// Affine map of a raw variable onto [0, 1].
struct UnitMap {
  double lo = 0.0;
  double hi = 1.0;
  double operator()(double v) const { return (v - lo) / (hi - lo); }
  double scale() const { return hi - lo; }
};

enum class MonotoneArms { both, untreated, treated, none };

struct SieveSpec {
  int p_y1 = 3;
  int p_y0 = 3;
  int p_x = 3;
  int p_u = 3;
  int p_z = 3;
  int nodes = 0;  // 0: the smallest exact count, 3 p_u / 2 + 1
  UnitMap y_map;
  UnitMap x_map;
  UnitMap z_map;
  MonotoneArms monotone = MonotoneArms::both;

  int node_count() const { return nodes > 0 ? nodes : 3 * p_u / 2 + 1; }
};

/// Maps set to the observed [min, max] of each variable.
SieveSpec fit_ranges(SieveSpec spec, std::span<const RawRow> rows);

/// Coefficient blocks. Outcome densities are (p + 1) x (p_u + 1) with rows
/// indexing the outcome basis; the U|Z blocks are (p_u + 1) x (p_z + 1).
struct SieveTheta {
  enum Block { y1 = 0, y0 = 1, x = 2, z1 = 3, z0 = 4 };
  std::array<Eigen::MatrixXd, 5> blocks;

  Eigen::MatrixXd& operator[](int b) { return blocks[static_cast<std::size_t>(b)]; }
  const Eigen::MatrixXd& operator[](int b) const { return blocks[static_cast<std::size_t>(b)]; }
  Eigen::Index size() const;
  Eigen::VectorXd vectorize() const;  // blocks in order, each column-major
  void assign(const Eigen::VectorXd& v);

  /// Every block constant: each density is 1 on its square.
  static SieveTheta uniform(const SieveSpec& spec);
};

const char* block_name(int block);

/// Linear constraints on the stacked coefficient vector: A_eq v = b_eq,
/// A_in v <= b_in, v >= 0.
struct SieveConstraints {
  Eigen::MatrixXd a_eq;
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd a_in;
  Eigen::VectorXd b_in;
};

/// w_j = integral of t b_{j,p}(t) over [0, 1] = (j + 1) / ((p + 1)(p + 2)).
Eigen::VectorXd mean_weights(int p);

/// Per-column sums equal to p + 1 (unit mass for every conditioning value)
/// and, on the monotone arms, nondecreasing w-weighted column sums.
SieveConstraints assemble_constraints(const SieveSpec& spec);

/// Largest violation of any constraint, nonnegativity included.
double constraint_residual(const SieveTheta& theta, const SieveSpec& spec);

/// f(t | s) for a block with rows over the outcome basis.
double block_density(const Eigen::MatrixXd& block, double t, double s);

struct LoglikEval {
  double value = 0.0;
  Eigen::VectorXd gradient;  // stacked like SieveTheta::vectorize
  int offending = -1;        // first observation with a non-positive integral
};

/// Log-likelihood on the unit scale, u integrated by Gauss-Legendre.
/// Returns -infinity when some observation has a non-positive integral.
/// Observations are split into fixed blocks evaluated on up to `workers` threads.
double sieve_loglik(const SieveTheta& theta, std::span<const RawRow> rows, const SieveSpec& spec, int workers = 1);
LoglikEval sieve_loglik_gradient(const SieveTheta& theta, std::span<const RawRow> rows, const SieveSpec& spec,
                                 int workers = 1);

struct SieveFitConfig {
  int max_iter = 300;
  double tol = 1e-8;  // stop when the predicted gain falls below tol * (1 + |loglik|)
  int restarts = 4;   // restart 0 is the uniform model, others are random feasible starts
  std::uint64_t seed = 0;
  int workers = 1;  // log-likelihood evaluation threads
};

struct SieveFit {
  SieveTheta theta;
  double loglik = 0.0;
  int iterations = 0;
  double predicted_gain = 0.0;  // g's of the final step, a stationarity measure
  double gradient_norm = 0.0;
  double constraint_residual = 0.0;
  bool converged = false;
  int best_restart = 0;
};

/// Sequential quadratic ascent with a BHHH curvature model; every step solves
/// a constrained QP and is cut back by an Armijo search, so iterates stay feasible.
SieveFit fit_sieve(std::span<const RawRow> rows, const SieveSpec& spec, const SieveFitConfig& config = {});

/// Plug-in F_{Y(1)-Y(0)}(delta) or F_{Y(0),Y(1)}(y0, y1) in raw outcome units,
/// averaging f_{U | D_i, Z_i} over the sample.
double sieve_dte(const SieveTheta& theta, std::span<const RawRow> rows, const SieveSpec& spec, const Target& target);

}  // namespace ldte

#endif  // LDTE_SIEVE_HPP
