#include "ldte/nmf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "ldte/qp.hpp"
#include "parallel.hpp"

namespace ldte {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Below this the residual is at rounding level and further cycles are noise.
constexpr double kObjectiveFloor = 1e-26;

struct Arms {
  std::vector<MatrixXd> h;
  int m_y = 0;
  int m_x = 0;
  int k = 0;
};

struct State {
  MatrixXd gx;
  std::vector<MatrixXd> gy;
  std::vector<MatrixXd> lam;
};

struct RestartResult {
  State state;
  double objective = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;
};

void clean_columns(MatrixXd& m) {
  m = m.cwiseMax(0.0);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double s = m.col(j).sum();
    if (s > 0.0) {
      m.col(j) /= s;
    } else {
      m.col(j).setConstant(1.0 / static_cast<double>(m.rows()));
    }
  }
}

QpProblem stochastic_qp(const MatrixXd& block, const MatrixXd& c, int groups, int k) {
  // variables v[g * k + j], one column-sum equality per j
  QpProblem p;
  const int n = groups * k;
  p.Q = MatrixXd::Zero(n, n);
  for (int g = 0; g < groups; ++g) p.Q.block(g * k, g * k, k, k) = block;
  p.c = c.reshaped<Eigen::RowMajor>();
  p.A_eq = MatrixXd::Zero(k, n);
  for (int g = 0; g < groups; ++g) p.A_eq.block(0, g * k, k, k).setIdentity();
  p.b_eq = VectorXd::Ones(k);
  p.nonneg = true;
  return p;
}

MatrixXd solve_stochastic(const QpProblem& p, int groups, int k) {
  const auto sol = solve_qp(p);
  if (sol.status == QpStatus::infeasible) throw EstimationError("NMF sub-step QP reported infeasibility");
  MatrixXd out = sol.x.reshaped<Eigen::RowMajor>(groups, k);
  clean_columns(out);
  return out;
}

MatrixXd lambda_update(const MatrixXd& h, const MatrixXd& gamma) {
  const int k = static_cast<int>(gamma.cols());
  QpProblem p;
  p.Q = gamma.transpose() * gamma;
  p.A_eq = MatrixXd::Ones(1, k);
  p.b_eq = VectorXd::Ones(1);
  p.nonneg = true;
  MatrixXd lam(k, h.cols());
  for (Eigen::Index z = 0; z < h.cols(); ++z) {
    p.c = -gamma.transpose() * h.col(z);
    const auto sol = solve_qp(p);
    if (sol.status == QpStatus::infeasible) throw EstimationError("NMF weight step QP reported infeasibility");
    lam.col(z) = sol.x;
  }
  clean_columns(lam);
  return lam;
}

// Rows of H for fixed x as an M_Y x K block.
auto x_block(const MatrixXd& h, int x, int m_y) { return h.middleRows(static_cast<Eigen::Index>(x) * m_y, m_y); }

MatrixXd gamma_x_update(const Arms& arms, const State& s) {
  const int k = arms.k;
  MatrixXd block = MatrixXd::Zero(k, k);
  MatrixXd c = MatrixXd::Zero(arms.m_x, k);
  for (std::size_t a = 0; a < arms.h.size(); ++a) {
    const MatrixXd& gy = s.gy[a];
    const MatrixXd& lam = s.lam[a];
    block += (gy.transpose() * gy).cwiseProduct(lam * lam.transpose());
    for (int x = 0; x < arms.m_x; ++x) {
      const MatrixXd hl = x_block(arms.h[a], x, arms.m_y) * lam.transpose();
      c.row(x) -= gy.cwiseProduct(hl).colwise().sum();
    }
  }
  return solve_stochastic(stochastic_qp(block, c, arms.m_x, k), arms.m_x, k);
}

MatrixXd gamma_y_update(const Arms& arms, const State& s, std::size_t a) {
  const int k = arms.k;
  const MatrixXd& lam = s.lam[a];
  const MatrixXd block = (s.gx.transpose() * s.gx).cwiseProduct(lam * lam.transpose());
  MatrixXd c = MatrixXd::Zero(arms.m_y, k);
  for (int x = 0; x < arms.m_x; ++x) {
    const MatrixXd hl = x_block(arms.h[a], x, arms.m_y) * lam.transpose();
    c -= hl * s.gx.row(x).asDiagonal();
  }
  return solve_stochastic(stochastic_qp(block, c, arms.m_y, k), arms.m_y, k);
}

double total_objective(const Arms& arms, const State& s) {
  double f = 0.0;
  for (std::size_t a = 0; a < arms.h.size(); ++a) f += arm_objective(arms.h[a], s.gx, s.gy[a], s.lam[a]);
  return f;
}

RestartResult run_restart(const Arms& arms, const std::vector<MatrixXd>& guess, const NmfConfig& cfg) {
  RestartResult r;
  State& s = r.state;
  s.gx = MatrixXd::Zero(arms.m_x, arms.k);
  for (std::size_t a = 0; a < arms.h.size(); ++a) {
    s.gx += marginal_x(guess[a], arms.m_y);
    s.gy.push_back(marginal_y(guess[a], arms.m_y));
    s.lam.push_back(lambda_update(arms.h[a], guess[a]));
  }
  clean_columns(s.gx);

  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_outer_iter; ++it) {
    s.gx = gamma_x_update(arms, s);
    if (cfg.record_trace) r.trace.push_back(total_objective(arms, s));
    for (std::size_t a = 0; a < arms.h.size(); ++a) s.gy[a] = gamma_y_update(arms, s, a);
    if (cfg.record_trace) r.trace.push_back(total_objective(arms, s));
    for (std::size_t a = 0; a < arms.h.size(); ++a) {
      s.lam[a] = lambda_update(arms.h[a], assemble_gamma(s.gx, s.gy[a]));
    }
    const double cur = total_objective(arms, s);
    if (cfg.record_trace) r.trace.push_back(cur);
    r.iterations = it + 1;
    if (cur < kObjectiveFloor || prev - cur < cfg.tol_objective * cur) {
      r.converged = true;
      r.objective = cur;
      return r;
    }
    prev = cur;
  }
  r.objective = total_objective(arms, s);
  return r;
}

MatrixXd mix_columns(const MatrixXd& h, std::mt19937_64& rng, int k) {
  std::gamma_distribution<double> g(1.0, 1.0);
  MatrixXd w(h.cols(), k);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = g(rng);
  for (int j = 0; j < k; ++j) w.col(j) /= w.col(j).sum();
  return h * w;
}

MatrixXd singular_guess(const MatrixXd& h, int k) {
  Eigen::JacobiSVD<MatrixXd> svd(h, Eigen::ComputeThinU);
  MatrixXd u = svd.matrixU().leftCols(k);
  for (int j = 0; j < k; ++j) {
    if (u.col(j).sum() < 0.0) u.col(j) = -u.col(j);
  }
  clean_columns(u);
  return u;
}

std::vector<MatrixXd> arm_guess(const std::vector<MatrixXd>& h, const NmfConfig& cfg, int restart) {
  std::vector<MatrixXd> out;
  if (restart == 0) {
    for (const auto& m : h) out.push_back(m.leftCols(cfg.k));
    return out;
  }
  if (restart == 1 && cfg.eigen_restart) {
    for (const auto& m : h) out.push_back(singular_guess(m, cfg.k));
    return out;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(restart), 0x4e4d46u};
  std::mt19937_64 rng(seq);
  for (const auto& m : h) out.push_back(mix_columns(m, rng, cfg.k));
  return out;
}

struct Search {
  RestartResult best;
  int best_index = 0;
  bool any_converged = false;
};

Search search(const Arms& arms, const NmfConfig& cfg) {
  if (cfg.k < 1) throw ConfigError("K must be positive");
  if (cfg.restarts < 1) throw ConfigError("restarts must be at least 1");
  if (!(cfg.tol_objective > 0.0)) throw ConfigError("tol_objective must be positive");
  if (arms.k > arms.m_x) throw ConfigError("K exceeds the number of X cells");
  std::vector<RestartResult> results(cfg.restarts);
  detail::parallel_for(cfg.restarts, cfg.workers,
                       [&](int r) { results[r] = run_restart(arms, arm_guess(arms.h, cfg, r), cfg); });
  Search out;
  for (const auto& r : results) out.any_converged = out.any_converged || r.converged;
  int best = -1;
  for (int r = 0; r < cfg.restarts; ++r) {
    if (out.any_converged && !results[r].converged) continue;
    if (best < 0 || results[r].objective < results[best].objective) best = r;
  }
  out.best_index = best;
  out.best = std::move(results[best]);
  return out;
}

Arms make_arms(std::vector<MatrixXd> h, int m_y, int k) {
  Arms arms;
  if (m_y < 1 || h.front().rows() % m_y != 0) throw ConfigError("H row count is not a multiple of M_Y");
  arms.m_y = m_y;
  arms.m_x = static_cast<int>(h.front().rows()) / m_y;
  arms.k = k;
  for (const auto& m : h) {
    if (m.rows() != h.front().rows()) throw ConfigError("H0 and H1 have different row counts");
    if (m.cols() != k) throw ConfigError("H must have exactly K columns (M_Z = K)");
  }
  arms.h = std::move(h);
  return arms;
}

std::vector<double> default_scores(const std::vector<double>& scores, Eigen::Index m_y) {
  if (!scores.empty()) {
    if (static_cast<Eigen::Index>(scores.size()) != m_y) throw ConfigError("one score per Y cell is required");
    return scores;
  }
  std::vector<double> s(m_y);
  std::iota(s.begin(), s.end(), 1.0);
  return s;
}

VectorXd conditional_mean(const MatrixXd& gy, const std::vector<double>& scores) {
  return Eigen::Map<const VectorXd>(scores.data(), static_cast<Eigen::Index>(scores.size())).transpose() * gy;
}

MatrixXd permute_cols(const MatrixXd& m, const std::vector<int>& order) {
  MatrixXd out(m.rows(), m.cols());
  for (std::size_t j = 0; j < order.size(); ++j) out.col(j) = m.col(order[j]);
  return out;
}

MatrixXd permute_rows(const MatrixXd& m, const std::vector<int>& order) {
  MatrixXd out(m.rows(), m.cols());
  for (std::size_t j = 0; j < order.size(); ++j) out.row(j) = m.row(order[j]);
  return out;
}

}  // namespace

CondProbMatrix assemble_gamma(const CondProbMatrix& gamma_x, const CondProbMatrix& gamma_y) {
  return CondProbMatrix(assemble_gamma(gamma_x.values(), gamma_y.values()));
}

double arm_objective(const MatrixXd& h, const MatrixXd& gamma_x, const MatrixXd& gamma_y, const MatrixXd& lambda) {
  return (h - assemble_gamma(gamma_x, gamma_y) * lambda).squaredNorm();
}

MatrixXd marginal_x(const MatrixXd& gamma, int m_y) {
  const Eigen::Index m_x = gamma.rows() / m_y;
  MatrixXd out(m_x, gamma.cols());
  for (Eigen::Index x = 0; x < m_x; ++x) out.row(x) = gamma.middleRows(x * m_y, m_y).colwise().sum();
  return out;
}

MatrixXd marginal_y(const MatrixXd& gamma, int m_y) {
  const Eigen::Index m_x = gamma.rows() / m_y;
  MatrixXd out = MatrixXd::Zero(m_y, gamma.cols());
  for (Eigen::Index x = 0; x < m_x; ++x) out += gamma.middleRows(x * m_y, m_y);
  return out;
}

InitialGuess initialize(const CondProbMatrix& h0, const CondProbMatrix& h1, const NmfConfig& config, int restart) {
  if (restart < 0 || restart >= config.restarts) throw ConfigError("restart index out of range");
  const auto g = arm_guess({h0.values(), h1.values()}, config, restart);
  return {g[0], g[1]};
}

MixtureFit fit(const CondProbMatrix& h0, const CondProbMatrix& h1, int m_y, const NmfConfig& config) {
  const Arms arms = make_arms({h0.values(), h1.values()}, m_y, config.k);
  Search s = search(arms, config);
  const State& st = s.best.state;
  MixtureFit out;
  out.gamma_x = CondProbMatrix(st.gx);
  out.gamma_y0 = CondProbMatrix(st.gy[0]);
  out.gamma_y1 = CondProbMatrix(st.gy[1]);
  out.lambda0 = CondProbMatrix(st.lam[0]);
  out.lambda1 = CondProbMatrix(st.lam[1]);
  out.objective = s.best.objective;
  out.restarts_used = config.restarts;
  out.converged = s.any_converged;
  out.best_restart = s.best_index;
  out.outer_iterations = s.best.iterations;
  out.trace = std::move(s.best.trace);
  return out;
}

std::vector<int> alignment_order(const MixtureFit& fit, const std::vector<double>& y_scores) {
  const auto scores = default_scores(y_scores, fit.gamma_y0.rows());
  const VectorXd m0 = conditional_mean(fit.gamma_y0.values(), scores);
  const VectorXd m1 = conditional_mean(fit.gamma_y1.values(), scores);
  std::vector<int> order(m0.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (m0[a] != m0[b]) return m0[a] < m0[b];
    if (m1[a] != m1[b]) return m1[a] < m1[b];
    return a < b;
  });
  return order;
}

MixtureFit permute(const MixtureFit& fit, const std::vector<int>& order) {
  MixtureFit out = fit;
  out.gamma_x = CondProbMatrix(permute_cols(fit.gamma_x.values(), order));
  out.gamma_y0 = CondProbMatrix(permute_cols(fit.gamma_y0.values(), order));
  out.gamma_y1 = CondProbMatrix(permute_cols(fit.gamma_y1.values(), order));
  out.lambda0 = CondProbMatrix(permute_rows(fit.lambda0.values(), order));
  out.lambda1 = CondProbMatrix(permute_rows(fit.lambda1.values(), order));
  return out;
}

MixtureFit align(const MixtureFit& fit, const std::vector<double>& y_scores) {
  return permute(fit, alignment_order(fit, y_scores));
}

SingleArmFit fit_single_arm(const CondProbMatrix& h, int m_y, const NmfConfig& config) {
  const Arms arms = make_arms({h.values()}, m_y, config.k);
  const Search s = search(arms, config);
  SingleArmFit out;
  out.gamma_x = CondProbMatrix(s.best.state.gx);
  out.gamma_y = CondProbMatrix(s.best.state.gy[0]);
  out.lambda = CondProbMatrix(s.best.state.lam[0]);
  out.objective = s.best.objective;
  out.converged = s.any_converged;
  out.best_restart = s.best_index;
  return out;
}

SingleArmFit align(const SingleArmFit& fit, const std::vector<double>& y_scores) {
  const auto scores = default_scores(y_scores, fit.gamma_y.rows());
  const VectorXd m = conditional_mean(fit.gamma_y.values(), scores);
  std::vector<int> order(m.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return m[a] < m[b]; });
  SingleArmFit out = fit;
  out.gamma_x = CondProbMatrix(permute_cols(fit.gamma_x.values(), order));
  out.gamma_y = CondProbMatrix(permute_cols(fit.gamma_y.values(), order));
  out.lambda = CondProbMatrix(permute_rows(fit.lambda.values(), order));
  return out;
}

}  // namespace ldte
