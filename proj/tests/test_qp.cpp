#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "ldte/error.hpp"
#include "ldte/qp.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// sort-and-threshold projection onto the probability simplex
VectorXd simplex_projection(const VectorXd& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cum += u[j];
    const double t = (cum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  return (v.array() - theta).max(0.0);
}

ldte::QpProblem simplex_problem(const MatrixXd& Q, const VectorXd& c) {
  ldte::QpProblem p;
  p.Q = Q;
  p.c = c;
  p.A_eq = MatrixXd::Ones(1, c.size());
  p.b_eq = VectorXd::Ones(1);
  p.nonneg = true;
  return p;
}

MatrixXd random_psd(std::mt19937_64& rng, int n, int rank) {
  std::normal_distribution<double> g;
  MatrixXd B(n, rank);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < rank; ++j) B(i, j) = g(rng);
  return B * B.transpose();
}

}  // namespace

TEST_CASE("nonnegative projection of a feasible point is the point itself") {
  ldte::QpProblem p;
  const VectorXd v = (VectorXd(4) << 0.5, 0.0, 2.0, 1.25).finished();
  p.Q = MatrixXd::Identity(4, 4);
  p.c = -v;
  p.nonneg = true;
  const auto sol = ldte::solve_qp(p);
  REQUIRE(sol.ok());
  CHECK((sol.x - v).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(sol.objective == doctest::Approx(-0.5 * v.squaredNorm()).epsilon(1e-12));
  CHECK(sol.kkt_residual <= 1e-9);
}

TEST_CASE("simplex projection of (2,0,0) is the first vertex") {
  const VectorXd target = (VectorXd(3) << 2.0, 0.0, 0.0).finished();
  const auto sol = ldte::solve_qp(simplex_problem(MatrixXd::Identity(3, 3), -target));
  REQUIRE(sol.ok());
  CHECK((sol.x - simplex_projection(target)).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(sol.x[0] == doctest::Approx(1.0));
}

TEST_CASE("random simplex projections match sort-and-threshold") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 9;
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = 2.0 * g(rng);
    const auto sol = ldte::solve_qp(simplex_problem(MatrixXd::Identity(n, n), -v));
    REQUIRE(sol.ok());
    CHECK((sol.x - simplex_projection(v)).lpNorm<Eigen::Infinity>() < 1e-10);
    CHECK(sol.kkt_residual <= 1e-9);
  }
}

TEST_CASE("random PSD objective on the simplex beats a dense grid") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 12; ++trial) {
    const int n = 3;
    const MatrixXd Q = random_psd(rng, n, 1 + trial % 3);
    VectorXd c(n);
    for (int i = 0; i < n; ++i) c[i] = g(rng);
    const auto p = simplex_problem(Q, c);
    const auto sol = ldte::solve_qp(p);
    REQUIRE(sol.ok());
    CHECK(sol.kkt_residual <= 1e-9);
    const int steps = 400;
    double best = 1e300;
    for (int a = 0; a <= steps; ++a) {
      for (int b = 0; a + b <= steps; ++b) {
        VectorXd x(3);
        x << a, b, steps - a - b;
        x /= steps;
        best = std::min(best, p.objective(x));
      }
    }
    CHECK(sol.objective <= best + 1e-12);
    CHECK(sol.objective >= best - 1e-4 * std::max(1.0, std::abs(best)));
  }
}

TEST_CASE("dimension-6 simplex problems agree with grid search") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  const int n = 6;
  const MatrixXd Q = random_psd(rng, n, 6);
  VectorXd c(n);
  for (int i = 0; i < n; ++i) c[i] = g(rng);
  const auto p = simplex_problem(Q, c);
  const auto sol = ldte::solve_qp(p);
  REQUIRE(sol.ok());
  const int steps = 24;
  double best = 1e300;
  std::vector<int> idx(n, 0);
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == n - 1) {
      idx[pos] = left;
      VectorXd x(n);
      for (int i = 0; i < n; ++i) x[i] = static_cast<double>(idx[i]) / steps;
      best = std::min(best, p.objective(x));
      return;
    }
    for (int a = 0; a <= left; ++a) {
      idx[pos] = a;
      rec(pos + 1, left - a);
    }
  };
  rec(0, steps);
  CHECK(sol.objective <= best + 1e-12);
}

TEST_CASE("solution is never worse than random feasible points") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> g;
  std::gamma_distribution<double> ga(1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 7;
    const MatrixXd Q = random_psd(rng, n, 1 + trial % n);
    VectorXd c(n);
    for (int i = 0; i < n; ++i) c[i] = g(rng);
    ldte::QpProblem p = simplex_problem(Q, c);
    p.A_in = MatrixXd::Zero(1, n);
    p.A_in(0, 0) = 1.0;
    p.b_in = VectorXd::Constant(1, 0.6);
    const auto sol = ldte::solve_qp(p);
    REQUIRE(sol.ok());
    CHECK(sol.kkt_residual <= 1e-9);
    CHECK((p.A_eq * sol.x - p.b_eq).lpNorm<Eigen::Infinity>() <= 1e-9);
    CHECK(sol.x.minCoeff() >= -1e-9);
    CHECK(sol.x[0] <= 0.6 + 1e-9);
    for (int r = 0; r < 100; ++r) {
      VectorXd x(n);
      for (int i = 0; i < n; ++i) x[i] = ga(rng);
      x /= x.sum();
      if (x[0] > 0.6) continue;
      CHECK(sol.objective <= p.objective(x) + 1e-12);
    }
  }
}

TEST_CASE("scaling Q and c leaves the minimizer unchanged") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g;
  const int n = 5;
  const MatrixXd Q = random_psd(rng, n, n);
  VectorXd c(n);
  for (int i = 0; i < n; ++i) c[i] = g(rng);
  const auto a = ldte::solve_qp(simplex_problem(Q, c));
  const auto b = ldte::solve_qp(simplex_problem(250.0 * Q, 250.0 * c));
  CHECK((a.x - b.x).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("a very large Q does not fake a degenerate step") {
  ldte::QpProblem p;
  p.Q = 1e24 * MatrixXd::Identity(3, 3);
  VectorXd a(3);
  a << 0.8, 0.1, 0.1;
  p.c = -p.Q * a;
  p.A_eq = MatrixXd::Ones(1, 3);
  p.b_eq = VectorXd::Ones(1);
  p.A_in = MatrixXd(1, 3);
  p.A_in << 1.0, -1.0, 0.0;
  p.b_in = VectorXd::Zero(1);
  p.nonneg = true;
  const auto sol = ldte::solve_qp(p);
  REQUIRE(sol.ok());
  CHECK(sol.x[0] == doctest::Approx(0.45).epsilon(1e-10));
  CHECK(sol.x[1] == doctest::Approx(0.45).epsilon(1e-10));
  CHECK(sol.x[2] == doctest::Approx(0.1).epsilon(1e-10));
}

TEST_CASE("singular Q picks the minimum-norm minimizer") {
  // f depends on x0 + x1 only; the minimizer set is a segment, min-norm is its midpoint
  ldte::QpProblem p;
  p.Q = MatrixXd::Ones(2, 2);
  p.c = VectorXd::Constant(2, -1.0);
  const auto sol = ldte::solve_qp(p);
  REQUIRE(sol.ok());
  CHECK(sol.x[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(sol.x[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(sol.kkt_residual <= 1e-9);
}

TEST_CASE("infeasible constraints return a Farkas certificate") {
  ldte::QpProblem p;
  p.Q = MatrixXd::Identity(2, 2);
  p.c = VectorXd::Zero(2);
  p.A_eq = MatrixXd::Ones(1, 2);
  p.b_eq = VectorXd::Constant(1, -1.0);
  p.nonneg = true;
  const auto sol = ldte::solve_qp(p);
  REQUIRE(sol.status == ldte::QpStatus::infeasible);
  const VectorXd& y = sol.certificate;
  REQUIRE(y.size() == 3);
  const VectorXd combo = p.A_eq.transpose() * y.head(1) - y.tail(2);
  CHECK(combo.lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(y.tail(2).minCoeff() >= 0.0);
  CHECK(p.b_eq.dot(y.head(1)) < 0.0);
}

TEST_CASE("conflicting inequalities are infeasible") {
  ldte::QpProblem p;
  p.Q = MatrixXd::Identity(1, 1);
  p.c = VectorXd::Zero(1);
  p.A_in = (MatrixXd(2, 1) << 1.0, -1.0).finished();
  p.b_in = (VectorXd(2) << 1.0, -2.0).finished();  // x <= 1 and x >= 2
  const auto sol = ldte::solve_qp(p);
  CHECK(sol.status == ldte::QpStatus::infeasible);
  CHECK(p.b_in.dot(sol.certificate) < 0.0);
  CHECK(std::abs(p.A_in.col(0).dot(sol.certificate)) < 1e-12);
}

TEST_CASE("redundant equalities are tolerated") {
  ldte::QpProblem p = simplex_problem(MatrixXd::Identity(3, 3), -VectorXd::Constant(3, 1.0));
  p.A_eq = MatrixXd::Ones(2, 3);
  p.A_eq.row(1) *= 2.0;
  p.b_eq = (VectorXd(2) << 1.0, 2.0).finished();
  const auto sol = ldte::solve_qp(p);
  REQUIRE(sol.ok());
  CHECK((sol.x.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("malformed problems are rejected") {
  ldte::QpProblem p;
  p.Q = MatrixXd::Identity(2, 2);
  p.Q(0, 1) = 1.0;
  p.c = VectorXd::Zero(2);
  CHECK_THROWS_AS(ldte::solve_qp(p), ldte::ConfigError);
  p.Q = MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(ldte::solve_qp(p), ldte::ConfigError);
}
