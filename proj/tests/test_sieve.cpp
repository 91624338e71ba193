#include <cmath>
#include <random>

#include "doctest.h"
#include "ldte/sieve.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ldte::SieveSpec;
using ldte::SieveTheta;

namespace {

double binom(int n, int k) { return std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0)); }

// explicit C(p, j) t^j (1 - t)^(p - j)
double bern(int p, int j, double t) { return binom(p, j) * std::pow(t, j) * std::pow(1.0 - t, p - j); }

double density(const MatrixXd& block, double t, double s) {
  double v = 0.0;
  const int p = static_cast<int>(block.rows()) - 1;
  const int q = static_cast<int>(block.cols()) - 1;
  for (int j = 0; j <= p; ++j)
    for (int k = 0; k <= q; ++k) v += block(j, k) * bern(p, j, t) * bern(q, k, s);
  return v;
}

SieveSpec unit_spec(int p) {
  SieveSpec s;
  s.p_y1 = s.p_y0 = s.p_x = s.p_u = s.p_z = p;
  return s;
}

// columns nondecreasing in their weighted means, each summing to rows
MatrixXd random_block(std::mt19937_64& rng, int rows, int cols) {
  std::gamma_distribution<double> g(2.0, 1.0);
  MatrixXd b(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) b(r, c) = g(rng);
    b.col(c) *= rows / b.col(c).sum();
  }
  return b;
}

SieveTheta random_theta(const SieveSpec& spec, std::mt19937_64& rng) {
  SieveTheta t = SieveTheta::uniform(spec);
  for (int b = 0; b < 5; ++b) t[b] = random_block(rng, static_cast<int>(t[b].rows()), static_cast<int>(t[b].cols()));
  return t;
}

double beta(std::mt19937_64& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  return x / (x + gb(rng));
}

// U uniform; X, Z, Y(d) are betas whose means rise with U
std::vector<ldte::RawRow> latent_sample(int n, std::uint64_t seed, double shift = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ldte::RawRow> rows;
  for (int i = 0; i < n; ++i) {
    const double u = unif(rng);
    ldte::RawRow r;
    r.d = unif(rng) < 0.5 ? 1 : 0;
    r.x = beta(rng, 1.0 + 4.0 * u, 5.0 - 4.0 * u);
    r.z = beta(rng, 1.0 + 4.0 * u, 5.0 - 4.0 * u);
    const double a = 1.0 + 3.0 * u + (r.d == 1 ? shift : 0.0);
    r.y = beta(rng, a, 4.0 - 3.0 * u);
    rows.push_back(r);
  }
  return rows;
}

std::vector<ldte::RawRow> uniform_sample(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ldte::RawRow> rows;
  for (int i = 0; i < n; ++i) rows.push_back({unif(rng), i % 2, unif(rng), unif(rng)});
  return rows;
}

int rank_of(const MatrixXd& m) {
  Eigen::FullPivLU<MatrixXd> lu(m);
  lu.setThreshold(1e-10);
  return static_cast<int>(lu.rank());
}

}  // namespace

TEST_CASE("Bernstein basis") {
  const VectorXd b = ldte::bernstein_basis(1, 0.0);
  CHECK(b[0] == 1.0);
  CHECK(b[1] == 0.0);
  for (int p : {0, 1, 2, 5, 9}) {
    for (double t : {0.0, 0.13, 0.5, 0.77, 1.0}) {
      const VectorXd v = ldte::bernstein_basis(p, t);
      CHECK(v.sum() == doctest::Approx(1.0).epsilon(1e-14));
      for (int j = 0; j <= p; ++j) CHECK(v[j] == doctest::Approx(bern(p, j, t)).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(ldte::bernstein_basis(2, 1.5), ldte::InputError);
  CHECK_THROWS_AS(ldte::bernstein_basis(-1, 0.5), ldte::ConfigError);
}

TEST_CASE("Gauss-Legendre integrates polynomials of degree 2n - 1 exactly") {
  for (int n : {1, 2, 4, 7, 12}) {
    const auto q = ldte::gauss_legendre(n);
    CHECK(q.weights.sum() == doctest::Approx(1.0).epsilon(1e-14));
    for (int k = 0; k < 2 * n; ++k) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += q.weights[i] * std::pow(q.nodes[i], k);
      CHECK(s == doctest::Approx(1.0 / (k + 1)).epsilon(1e-13));
    }
  }
}

TEST_CASE("every basis function integrates to 1 / (p + 1)") {
  const auto q = ldte::gauss_legendre(8);
  for (int p : {1, 3, 6}) {
    VectorXd integral = VectorXd::Zero(p + 1);
    for (int i = 0; i < 8; ++i) integral += q.weights[i] * ldte::bernstein_basis(p, q.nodes[i]);
    for (int j = 0; j <= p; ++j) CHECK(integral[j] == doctest::Approx(1.0 / (p + 1)).epsilon(1e-13));
  }
}

TEST_CASE("uniform coefficients give the unit density and satisfy the constraints") {
  const SieveSpec spec = unit_spec(2);
  const SieveTheta t = SieveTheta::uniform(spec);
  for (double y : {0.0, 0.3, 1.0})
    for (double u : {0.1, 0.9}) CHECK(ldte::block_density(t[SieveTheta::y1], y, u) == doctest::Approx(1.0));
  CHECK(t[SieveTheta::y1].colwise().sum().isApproxToConstant(3.0));
  CHECK(ldte::constraint_residual(t, spec) <= 1e-14);
}

TEST_CASE("mean weights") {
  const VectorXd w = ldte::mean_weights(2);
  CHECK(w[0] == doctest::Approx(1.0 / 12));
  CHECK(w[1] == doctest::Approx(2.0 / 12));
  CHECK(w[2] == doctest::Approx(3.0 / 12));
  const auto q = ldte::gauss_legendre(6);
  for (int p : {1, 4, 7}) {
    const VectorXd wp = ldte::mean_weights(p);
    for (int j = 0; j <= p; ++j) {
      double s = 0.0;
      for (int i = 0; i < 6; ++i) s += q.weights[i] * q.nodes[i] * bern(p, j, q.nodes[i]);
      CHECK(wp[j] == doctest::Approx(s).epsilon(1e-13));
    }
  }
}

TEST_CASE("decreasing conditional means violate the monotone constraint") {
  const SieveSpec spec = unit_spec(2);
  SieveTheta t = SieveTheta::uniform(spec);
  // mass moves towards low outcomes as u grows
  t[SieveTheta::y1] << 2.0, 1.0, 0.0,  //
      1.0, 1.0, 1.0,                   //
      0.0, 1.0, 2.0;
  t[SieveTheta::y1] = t[SieveTheta::y1].rowwise().reverse().eval();
  CHECK(ldte::constraint_residual(t, spec) > 0.1);
  SieveSpec relaxed = spec;
  relaxed.monotone = ldte::MonotoneArms::untreated;
  CHECK(ldte::constraint_residual(t, relaxed) <= 1e-14);

  const auto c = ldte::assemble_constraints(spec);
  const VectorXd v = t.vectorize();
  CHECK((c.a_in * v - c.b_in).maxCoeff() > 0.1);
  CHECK((c.a_eq * v - c.b_eq).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("per-column sum-to-one spans the same set as the monomial system") {
  for (int py : {1, 2, 3}) {
    for (int pu : {1, 2, 3}) {
      const int dim = (py + 1) * (pu + 1);
      // theta(j, l) at l * (py + 1) + j
      MatrixXd mono = MatrixXd::Zero(pu + 1, dim + 1);
      for (int k = 0; k <= pu; ++k) {
        for (int l = 0; l <= k; ++l) {
          const double coef = std::pow(-1.0, k - l) * binom(pu, k) * binom(k, l) / (py + 1);
          for (int j = 0; j <= py; ++j) mono(k, l * (py + 1) + j) += coef;
        }
      }
      mono(0, dim) = 1.0;
      MatrixXd col = MatrixXd::Zero(pu + 1, dim + 1);
      for (int l = 0; l <= pu; ++l) {
        for (int j = 0; j <= py; ++j) col(l, l * (py + 1) + j) = 1.0;
        col(l, dim) = py + 1;
      }
      MatrixXd both(2 * (pu + 1), dim + 1);
      both << mono, col;
      CHECK(rank_of(mono) == pu + 1);
      CHECK(rank_of(col) == pu + 1);
      CHECK(rank_of(both) == pu + 1);
    }
  }
}

TEST_CASE("uniform model has zero log-likelihood on any data") {
  const SieveSpec spec = unit_spec(3);
  const auto rows = latent_sample(300, 3);
  CHECK(std::abs(ldte::sieve_loglik(SieveTheta::uniform(spec), rows, spec)) < 1e-10);
}

TEST_CASE("degree-zero sieve is a product of constants") {
  SieveSpec spec = unit_spec(0);
  SieveTheta t = SieveTheta::uniform(spec);
  t[SieveTheta::y0](0, 0) = 2.0;
  t[SieveTheta::x](0, 0) = 3.0;
  t[SieveTheta::z0](0, 0) = 0.5;
  std::vector<ldte::RawRow> one{{0.4, 0, 0.6, 0.2}};
  CHECK(ldte::sieve_loglik(t, one, spec) == doctest::Approx(std::log(2.0 * 3.0 * 0.5)).epsilon(1e-14));
}

TEST_CASE("quadrature log-likelihood matches a dense Riemann sum") {
  std::mt19937_64 rng(11);
  SieveSpec spec = unit_spec(3);
  spec.p_y1 = 4;
  spec.p_u = 4;
  const auto rows = latent_sample(20, 4);
  for (int rep = 0; rep < 3; ++rep) {
    const SieveTheta t = random_theta(spec, rng);
    const int m = 100000;
    double oracle = 0.0;
    for (const auto& r : rows) {
      const MatrixXd& y = r.d == 1 ? t[SieveTheta::y1] : t[SieveTheta::y0];
      const MatrixXd& z = r.d == 1 ? t[SieveTheta::z1] : t[SieveTheta::z0];
      // coefficients on the u basis once the observed values are fixed
      VectorXd cy = VectorXd::Zero(spec.p_u + 1), cx = cy, cz = cy;
      for (int k = 0; k <= spec.p_u; ++k) {
        for (Eigen::Index j = 0; j < y.rows(); ++j) cy[k] += y(j, k) * bern(static_cast<int>(y.rows()) - 1, static_cast<int>(j), r.y);
        for (int j = 0; j <= spec.p_x; ++j) cx[k] += t[SieveTheta::x](j, k) * bern(spec.p_x, j, r.x);
        for (int l = 0; l <= spec.p_z; ++l) cz[k] += z(k, l) * bern(spec.p_z, l, r.z);
      }
      double integral = 0.0;
      VectorXd bu(spec.p_u + 1);
      for (int i = 0; i < m; ++i) {
        const double u = (i + 0.5) / m;
        for (int k = 0; k <= spec.p_u; ++k) bu[k] = bern(spec.p_u, k, u);
        integral += cy.dot(bu) * cx.dot(bu) * cz.dot(bu);
      }
      oracle += std::log(integral / m);
    }
    CHECK(std::abs(ldte::sieve_loglik(t, rows, spec) - oracle) < 1e-8);
  }
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 rng(5);
  const SieveSpec spec = unit_spec(3);
  const auto rows = latent_sample(200, 6);
  const SieveTheta t = random_theta(spec, rng);
  const auto ev = ldte::sieve_loglik_gradient(t, rows, spec);
  const VectorXd v = t.vectorize();
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    SieveTheta a = t, b = t;
    VectorXd va = v, vb = v;
    va[i] += h;
    vb[i] -= h;
    a.assign(va);
    b.assign(vb);
    const double fd = (ldte::sieve_loglik(a, rows, spec) - ldte::sieve_loglik(b, rows, spec)) / (2 * h);
    CHECK(std::abs(fd - ev.gradient[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("parallel evaluation is identical to serial") {
  std::mt19937_64 rng(8);
  const SieveSpec spec = unit_spec(3);
  const auto rows = latent_sample(1500, 9);
  const SieveTheta t = random_theta(spec, rng);
  const auto a = ldte::sieve_loglik_gradient(t, rows, spec, 1);
  const auto b = ldte::sieve_loglik_gradient(t, rows, spec, 4);
  CHECK(a.value == b.value);
  CHECK(a.gradient == b.gradient);
}

TEST_CASE("zero likelihood is reported with the offending row") {
  SieveSpec spec = unit_spec(1);
  SieveTheta t = SieveTheta::uniform(spec);
  t[SieveTheta::x] << 2.0, 2.0, 0.0, 0.0;  // density 2(1 - x)
  std::vector<ldte::RawRow> rows{{0.5, 0, 0.5, 0.5}, {0.5, 1, 1.0, 0.5}};
  const auto ev = ldte::sieve_loglik_gradient(t, rows, spec);
  CHECK(std::isinf(ev.value));
  CHECK(ev.offending == 1);
}

TEST_CASE("fitted sieve is feasible, normalized and monotone") {
  const auto rows = latent_sample(1000, 21);
  const SieveSpec spec = ldte::fit_ranges(unit_spec(3), rows);
  ldte::SieveFitConfig cfg;
  cfg.restarts = 2;
  cfg.seed = 3;
  const auto fit = ldte::fit_sieve(rows, spec, cfg);
  CHECK(fit.converged);
  CHECK(fit.constraint_residual <= 1e-8);
  CHECK(fit.loglik > 0.0);

  const auto q = ldte::gauss_legendre(8);
  for (int b = 0; b < 5; ++b) {
    const MatrixXd& blk = fit.theta[b];
    CHECK(blk.minCoeff() >= -1e-12);
    for (int i = 0; i <= 100; ++i) {
      const double s = i / 100.0;
      double mass = 0.0;
      for (int k = 0; k < 8; ++k) mass += q.weights[k] * density(blk, q.nodes[k], s);
      CHECK(mass == doctest::Approx(1.0).epsilon(1e-8));
      for (int j = 0; j <= 100; ++j) CHECK(density(blk, j / 100.0, s) >= -1e-10);
    }
  }

  const VectorXd w1 = ldte::mean_weights(spec.p_y1);
  const VectorXd w0 = ldte::mean_weights(spec.p_y0);
  double prev1 = -1.0, prev0 = -1.0;
  for (int i = 0; i <= 100; ++i) {
    const VectorXd bu = ldte::bernstein_basis(spec.p_u, i / 100.0);
    const double m1 = w1.dot(fit.theta[SieveTheta::y1] * bu);
    const double m0 = w0.dot(fit.theta[SieveTheta::y0] * bu);
    CHECK(m1 >= prev1 - 1e-12);
    CHECK(m0 >= prev0 - 1e-12);
    prev1 = m1;
    prev0 = m0;
  }
}

TEST_CASE("data from the uniform model: the fit dominates the truth") {
  const auto rows = uniform_sample(400, 2);
  SieveSpec spec = unit_spec(2);
  ldte::SieveFitConfig cfg;
  cfg.restarts = 2;
  const auto fit = ldte::fit_sieve(rows, spec, cfg);
  CHECK(fit.loglik >= ldte::sieve_loglik(SieveTheta::uniform(spec), rows, spec) - 1e-6);
}

TEST_CASE("sieve DTE functionals") {
  const auto rows = latent_sample(200, 12);
  SieveSpec spec = ldte::fit_ranges(unit_spec(3), rows);
  std::mt19937_64 rng(13);
  SieveTheta t = random_theta(spec, rng);
  // identical outcome laws that ignore u
  const VectorXd col = t[SieveTheta::y0].col(0);
  for (Eigen::Index k = 0; k < t[SieveTheta::y0].cols(); ++k) {
    t[SieveTheta::y0].col(k) = col;
    t[SieveTheta::y1].col(k) = col;
  }
  CHECK(ldte::sieve_dte(t, rows, spec, ldte::Target::marginal_at(0.0)) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(ldte::sieve_dte(t, rows, spec, ldte::Target::marginal_at(spec.y_map.scale())) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ldte::sieve_dte(t, rows, spec, ldte::Target::marginal_at(-spec.y_map.scale())) == doctest::Approx(0.0).epsilon(1e-12));
  const double lo = spec.y_map.lo;
  const double hi = spec.y_map.hi;
  CHECK(ldte::sieve_dte(t, rows, spec, ldte::Target::joint_at(hi, hi)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ldte::sieve_dte(t, rows, spec, ldte::Target::joint_at(lo, hi)) == doctest::Approx(0.0).epsilon(1e-12));

  // the marginal CDF at delta is nondecreasing in delta
  const SieveTheta r = random_theta(spec, rng);
  double prev = -1.0;
  for (int i = -10; i <= 10; ++i) {
    const double v = ldte::sieve_dte(r, rows, spec, ldte::Target::marginal_at(spec.y_map.scale() * i / 10.0));
    CHECK(v >= prev - 1e-12);
    prev = v;
  }
}

TEST_CASE("block layout round-trips through the stacked vector") {
  std::mt19937_64 rng(1);
  SieveSpec spec = unit_spec(2);
  spec.p_y1 = 4;
  spec.p_x = 1;
  const SieveTheta t = random_theta(spec, rng);
  SieveTheta u = SieveTheta::uniform(spec);
  u.assign(t.vectorize());
  for (int b = 0; b < 5; ++b) CHECK(u[b] == t[b]);
  CHECK(t.size() == 5 * 3 + 3 * 3 + 2 * 3 + 2 * 9);
}
