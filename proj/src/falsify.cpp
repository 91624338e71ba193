#include "ldte/falsify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ldte {

using Eigen::MatrixXd;
using Eigen::VectorXd;

SplitFit split_fit(const CellTable& table, const NmfConfig& config) {
  SplitFit out;
  out.untreated = align(fit_single_arm(build_h(table, 0), table.shape.m_y, config), table.y_scores);
  out.treated = align(fit_single_arm(build_h(table, 1), table.shape.m_y, config), table.y_scores);
  return out;
}

LabelMatch match_labels(const MatrixXd& g1, const MatrixXd& g0) {
  if (g1.cols() != g0.cols() || g1.rows() != g0.rows()) throw ConfigError("match_labels: shape mismatch");
  const auto k = static_cast<int>(g1.cols());
  if (k > 8) throw ConfigError("label matching enumerates K! permutations and supports K <= 8; use an assignment solver");
  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  LabelMatch best;
  best.criterion = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (int j = 0; j < k; ++j) c += (g1.col(j) - g0.col(perm[j])).squaredNorm();
    if (c < best.criterion) {
      best.criterion = c;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

FalsificationResult falsification_test(const CellTable& table, const FalsifyConfig& config) {
  const auto& s = table.shape;
  const SplitFit fits = split_fit(table, config.nmf);
  const LabelMatch match = match_labels(fits.treated.gamma_x.values(), fits.untreated.gamma_x.values());

  // relabel the untreated arm so that its class k is the treated class k
  MatrixXd lam0(s.k, s.k);
  for (int k = 0; k < s.k; ++k) lam0.row(k) = fits.untreated.lambda.values().row(match.permutation[k]);
  const NuisanceSet eta = make_nuisance(CondProbMatrix(lam0), fits.treated.lambda, table, config.cond_cap);

  std::vector<std::unique_ptr<PairFunctional>> owned;
  std::vector<const PairFunctional*> fs;
  for (int k = 0; k < s.k; ++k) {
    for (int x = 0; x < s.m_x; ++x) {
      owned.push_back(make_gamma_x_functional({{1, x, k, 1.0}, {0, x, k, -1.0}}, eta));
      fs.push_back(owned.back().get());
    }
  }
  const auto est = orthogonal_estimate(table, eta, fs);
  const double scale = config.variance == VarianceConvention::hoeffding ? 4.0 : 1.0;

  FalsificationResult out;
  out.w = est.theta;
  out.avar = scale * est.sigma;
  out.full_df = static_cast<int>(out.w.size());
  out.permutation = match.permutation;
  out.degraded = est.degraded;

  const Eigen::SelfAdjointEigenSolver<MatrixXd> es(out.avar);
  const VectorXd& ev = es.eigenvalues();
  const double top = ev.maxCoeff();
  VectorXd proj = es.eigenvectors().transpose() * out.w;
  double t = 0.0;
  int rank = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (top > 0.0 && ev[i] > config.rank_tol * top) {
      t += proj[i] * proj[i] / ev[i];
      ++rank;
    }
  }
  out.df = rank;
  out.t_stat = table.n * t;
  out.p_value = rank > 0 ? chi2_sf(out.t_stat, rank) : 1.0;
  return out;
}

namespace {

// Series for the lower regularized gamma P(a, x), valid for x < a + 1.
double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Lentz continued fraction for Q(a, x), valid for x >= a + 1.
double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-17) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0)) throw ConfigError("incomplete gamma needs a > 0");
  if (x < 0.0 || std::isnan(x)) throw ConfigError("incomplete gamma needs x >= 0");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_fraction(a, x);
}

double chi2_sf(double x, double df) {
  if (x <= 0.0) return 1.0;
  return std::clamp(regularized_gamma_q(0.5 * df, 0.5 * x), 0.0, 1.0);
}

}  // namespace ldte
