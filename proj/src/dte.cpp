#include "ldte/dte.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ldte {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------- nuisances

VectorXd NuisanceSet::vectorize() const {
  VectorXd v(size());
  for (int kk = 0; kk < k; ++kk)
    for (int d = 0; d < 2; ++d)
      for (int j = 0; j < k; ++j) v[lt_index(j, kk, d, k)] = lambda_tilde[d](j, kk);
  v.segment(2 * k * k, k) = p_u;
  v.tail(2 * k) = p_dz;
  return v;
}

NuisanceSet NuisanceSet::from_vector(const VectorXd& v, int k) {
  NuisanceSet eta;
  eta.k = k;
  if (v.size() != 2 * k * k + 3 * k) throw ConfigError("nuisance vector has the wrong length");
  for (int d = 0; d < 2; ++d) eta.lambda_tilde[d].resize(k, k);
  for (int kk = 0; kk < k; ++kk)
    for (int d = 0; d < 2; ++d)
      for (int j = 0; j < k; ++j) eta.lambda_tilde[d](j, kk) = v[lt_index(j, kk, d, k)];
  eta.p_u = v.segment(2 * k * k, k);
  eta.p_dz = v.tail(2 * k);
  return eta;
}

MatrixXd invert_weights(const CondProbMatrix& lambda, double cond_cap) {
  if (lambda.rows() != lambda.cols()) throw ConfigError("mixture-weight matrix must be square");
  Eigen::JacobiSVD<MatrixXd> svd(lambda.values());
  const VectorXd& sv = svd.singularValues();
  const double smin = sv[sv.size() - 1];
  if (!(smin > 0.0) || sv[0] / smin > cond_cap) {
    throw RankDeficiency("mixture-weight matrix is singular or ill-conditioned (smallest singular value " +
                             std::to_string(smin) + ")",
                         smin);
  }
  return lambda.values().partialPivLu().inverse();
}

VectorXd marginal_u(const MatrixXd& lambda0, const MatrixXd& lambda1, const VectorXd& p_dz) {
  const Index k = lambda0.rows();
  if (lambda0.cols() != k || lambda1.rows() != k || lambda1.cols() != k || p_dz.size() != 2 * k) {
    throw ConfigError("marginal_u: shape mismatch");
  }
  return lambda0 * p_dz.head(k) + lambda1 * p_dz.tail(k);
}

VectorXd cell_p_dz(const CellTable& t) {
  const auto& s = t.shape;
  VectorXd p = VectorXd::Zero(2 * s.k);
  for (int y = 0; y < s.m_y; ++y)
    for (int d = 0; d < 2; ++d)
      for (int x = 0; x < s.m_x; ++x)
        for (int z = 0; z < s.k; ++z) p[d * s.k + z] += t.prob(s.index(y, d, x, z));
  for (int d = 0; d < 2; ++d) {
    for (int z = 0; z < s.k; ++z) {
      if (!(p[d * s.k + z] > 0.0)) {
        throw InsufficientSupport("no observations in cell (d=" + std::to_string(d) + ", z=" + std::to_string(z + 1) +
                                  ")");
      }
    }
  }
  return p;
}

NuisanceSet make_nuisance(const CondProbMatrix& lambda0, const CondProbMatrix& lambda1, const CellTable& table,
                          double cond_cap) {
  NuisanceSet eta;
  eta.k = static_cast<int>(lambda0.rows());
  if (eta.k != table.shape.k) throw ConfigError("K of the fit and of the data disagree");
  eta.lambda_tilde[0] = invert_weights(lambda0, cond_cap);
  eta.lambda_tilde[1] = invert_weights(lambda1, cond_cap);
  eta.p_dz = cell_p_dz(table);
  eta.p_u = marginal_u(lambda0.values(), lambda1.values(), eta.p_dz);
  return eta;
}

NuisanceSet make_nuisance(const MixtureFit& fit, const CellTable& table, double cond_cap) {
  return make_nuisance(fit.lambda0, fit.lambda1, table, cond_cap);
}

Target Target::marginal_at(double delta) {
  Target t;
  t.kind = Kind::marginal;
  t.delta = delta;
  return t;
}

Target Target::joint_at(double y0, double y1) {
  Target t;
  t.kind = Kind::joint;
  t.y0 = y0;
  t.y1 = y1;
  return t;
}

bool score_leq(double a, double b) { return a <= b + 1e-12 * std::max(1.0, std::abs(b)); }

namespace {

// alpha[d](j, k) = lambda_tilde[d](j, k) / p(d, j): the weight a unit in cell
// (d, z_j) carries toward latent class k.
std::array<MatrixXd, 2> alpha_of(const NuisanceSet& eta) {
  std::array<MatrixXd, 2> a;
  for (int d = 0; d < 2; ++d) {
    a[d] = eta.lambda_tilde[d];
    for (int j = 0; j < eta.k; ++j) a[d].row(j) /= eta.p(d, j);
  }
  return a;
}

// Cell-level aggregates of a table. Pair probabilities of two distinct units
// are scale * P_a P_b - corr * [a == b] P_a.
struct Moments {
  CellShape s;
  double scale = 1.0;
  double corr = 0.0;
  std::array<MatrixXd, 2> pd;  // M x K: P(y, d, x, z_j) at row (y, x)
  std::array<MatrixXd, 2> py;  // M_Y x K
  std::array<MatrixXd, 2> px;  // M_X x K
  VectorXd pxm;                // M_X

  explicit Moments(const CellTable& t) : s(t.shape) {
    if (!t.population) {
      if (t.n < 2.0) throw InsufficientSupport("at least two observations are required");
      scale = t.n / (t.n - 1.0);
      corr = 1.0 / (t.n - 1.0);
    }
    pxm = VectorXd::Zero(s.m_x);
    for (int d = 0; d < 2; ++d) {
      pd[d] = MatrixXd::Zero(s.m(), s.k);
      py[d] = MatrixXd::Zero(s.m_y, s.k);
      px[d] = MatrixXd::Zero(s.m_x, s.k);
      for (int y = 0; y < s.m_y; ++y)
        for (int x = 0; x < s.m_x; ++x)
          for (int z = 0; z < s.k; ++z) {
            const double p = t.prob(s.index(y, d, x, z));
            pd[d](s.row(y, x), z) = p;
            py[d](y, z) += p;
            px[d](x, z) += p;
            pxm[x] += p;
          }
    }
  }
};

// Gradient of a pair mean in (alpha, p_u, direct p) coordinates.
struct AlphaGrad {
  std::array<MatrixXd, 2> g_alpha;
  VectorXd g_pu;
  MatrixXd g_p;  // 2 x K, dependence on p other than through alpha

  explicit AlphaGrad(int k) : g_pu(VectorXd::Zero(k)), g_p(MatrixXd::Zero(2, k)) {
    g_alpha[0] = MatrixXd::Zero(k, k);
    g_alpha[1] = MatrixXd::Zero(k, k);
  }

  // alpha = lambda_tilde / p, so d/d lambda_tilde = g / p and d/d p = -g lambda_tilde / p^2.
  VectorXd chain(const NuisanceSet& eta) const {
    const int k = eta.k;
    VectorXd out = VectorXd::Zero(eta.size());
    for (int d = 0; d < 2; ++d)
      for (int j = 0; j < k; ++j) {
        const double p = eta.p(d, j);
        double gp = g_p(d, j);
        for (int kk = 0; kk < k; ++kk) {
          out[NuisanceSet::lt_index(j, kk, d, k)] = g_alpha[d](j, kk) / p;
          gp -= g_alpha[d](j, kk) * eta.lambda_tilde[d](j, kk) / (p * p);
        }
        out[eta.pdz_index(d, j)] = gp;
      }
    out.segment(2 * k * k, k) = g_pu;
    return out;
  }
};

// Pair indicator of a DTE target for a control unit in Y cell y0 and a treated unit in Y cell y1.
MatrixXd target_indicator(const Target& t, const std::vector<double>& scores) {
  const auto m = static_cast<Index>(scores.size());
  MatrixXd ind(m, m);
  for (Index a = 0; a < m; ++a)
    for (Index b = 0; b < m; ++b) {
      if (t.kind == Target::Kind::marginal) {
        ind(a, b) = score_leq(scores[b] - scores[a], t.delta) ? 1.0 : 0.0;
      } else {
        ind(a, b) = (score_leq(scores[a], t.y0) && score_leq(scores[b], t.y1)) ? 1.0 : 0.0;
      }
    }
  return ind;
}

class DteFunctional final : public PairFunctional {
 public:
  DteFunctional(const Target& t, const std::vector<double>& scores, const NuisanceSet& eta)
      : eta_(eta), ind_(target_indicator(t, scores)), alpha_(alpha_of(eta)) {
    // c(j, j') / (p(0, j) p(1, j')) = sum_k p_u(k) alpha_0(j, k) alpha_1(j', k)
    weight_ = alpha_[0] * eta.p_u.asDiagonal() * alpha_[1].transpose();
  }

  double kernel(const Cell& a, const Cell& b) const override {
    double v = 0.0;
    if (a.d == 0 && b.d == 1) v += weight_(a.z, b.z) * ind_(a.y, b.y);
    if (b.d == 0 && a.d == 1) v += weight_(b.z, a.z) * ind_(b.y, a.y);
    return 0.5 * v;
  }

  double mean(const CellTable& table) const override {
    const Moments mo(table);
    return mo.scale * (mo.py[0].transpose() * ind_ * mo.py[1]).cwiseProduct(weight_).sum();
  }

  VectorXd gradient(const CellTable& table) const override {
    const Moments mo(table);
    const MatrixXd r = mo.scale * (mo.py[0].transpose() * ind_ * mo.py[1]);  // K x K over (j, j')
    AlphaGrad g(eta_.k);
    g.g_alpha[0] = (r * alpha_[1]) * eta_.p_u.asDiagonal();
    g.g_alpha[1] = (r.transpose() * alpha_[0]) * eta_.p_u.asDiagonal();
    g.g_pu = (alpha_[0].transpose() * r * alpha_[1]).diagonal();
    return g.chain(eta_);
  }

 private:
  const NuisanceSet& eta_;
  MatrixXd ind_;
  std::array<MatrixXd, 2> alpha_;
  MatrixXd weight_;
};

class GammaXFunctional final : public PairFunctional {
 public:
  GammaXFunctional(std::vector<GammaXTerm> terms, const NuisanceSet& eta)
      : eta_(eta), terms_(std::move(terms)), alpha_(alpha_of(eta)) {}

  double kernel(const Cell& a, const Cell& b) const override {
    double v = 0.0;
    for (const auto& t : terms_) {
      if (a.d == t.d && a.x == t.x) v += t.coef * alpha_[t.d](a.z, t.k);
      if (b.d == t.d && b.x == t.x) v += t.coef * alpha_[t.d](b.z, t.k);
    }
    return 0.5 * v;
  }

  double mean(const CellTable& table) const override {
    const Moments mo(table);
    double v = 0.0;
    for (const auto& t : terms_) v += t.coef * mo.px[t.d].row(t.x).dot(alpha_[t.d].col(t.k));
    return v;
  }

  VectorXd gradient(const CellTable& table) const override {
    const Moments mo(table);
    AlphaGrad g(eta_.k);
    for (const auto& t : terms_) g.g_alpha[t.d].col(t.k) += t.coef * mo.px[t.d].row(t.x).transpose();
    return g.chain(eta_);
  }

 private:
  const NuisanceSet& eta_;
  std::vector<GammaXTerm> terms_;
  std::array<MatrixXd, 2> alpha_;
};

}  // namespace

std::unique_ptr<PairFunctional> make_target_functional(const Target& target, const std::vector<double>& y_scores,
                                                       const NuisanceSet& eta) {
  return std::make_unique<DteFunctional>(target, y_scores, eta);
}

std::unique_ptr<PairFunctional> make_gamma_x_functional(std::vector<GammaXTerm> terms, const NuisanceSet& eta) {
  return std::make_unique<GammaXFunctional>(std::move(terms), eta);
}

// ----------------------------------------------------------------------- phi

VectorXd build_phi(const Cell& a, const Cell& b, const CellShape& s, const NuisanceSet& eta) {
  const PhiLayout lay{s};
  const auto alpha = alpha_of(eta);
  VectorXd phi = VectorXd::Zero(lay.size());
  for (int k = 0; k < s.k; ++k) {
    const double aa = alpha[a.d](a.z, k);
    const double ab = alpha[b.d](b.z, k);
    phi[lay.a(a.y, a.x, a.d, k)] += 0.5 * aa;
    phi[lay.a(b.y, b.x, b.d, k)] += 0.5 * ab;
    if (a.d == b.d) {
      phi[lay.a(a.y, b.x, a.d, k)] -= 0.5 * aa * ab;
      phi[lay.a(b.y, a.x, a.d, k)] -= 0.5 * aa * ab;
    }
  }
  for (int d = 0; d < 2; ++d) {
    phi[lay.b(d, a.x)] += 0.5;
    phi[lay.b(d, b.x)] += 0.5;
  }
  for (int k = 0; k < s.k; ++k) {
    phi[lay.b(a.d, a.x)] -= 0.5 * eta.p_u[k] * alpha[a.d](a.z, k);
    phi[lay.b(b.d, b.x)] -= 0.5 * eta.p_u[k] * alpha[b.d](b.z, k);
  }
  for (int d = 0; d < 2; ++d)
    for (int j = 0; j < s.k; ++j) phi[lay.c(d, j)] -= eta.p(d, j);
  phi[lay.c(a.d, a.z)] += 0.5;
  phi[lay.c(b.d, b.z)] += 0.5;
  return phi;
}

VectorXd phi_mean(const CellTable& table, const NuisanceSet& eta) {
  const Moments mo(table);
  const auto& s = mo.s;
  const PhiLayout lay{s};
  const auto alpha = alpha_of(eta);
  VectorXd out(lay.size());
  for (int d = 0; d < 2; ++d) {
    const MatrixXd g = mo.pd[d] * alpha[d];
    const MatrixXd gy = mo.py[d] * alpha[d];
    const MatrixXd gx = mo.px[d] * alpha[d];
    const MatrixXd g2 = mo.pd[d] * alpha[d].cwiseAbs2();
    for (int k = 0; k < s.k; ++k)
      for (int x = 0; x < s.m_x; ++x)
        for (int y = 0; y < s.m_y; ++y) {
          const int r = s.row(y, x);
          out[lay.a(y, x, d, k)] = g(r, k) - mo.scale * gy(y, k) * gx(x, k) + mo.corr * g2(r, k);
        }
    const VectorXd pux = gx * eta.p_u;
    for (int x = 0; x < s.m_x; ++x) out[lay.b(d, x)] = mo.pxm[x] - pux[x];
    for (int j = 0; j < s.k; ++j) out[lay.c(d, j)] = mo.py[d].col(j).sum() - eta.p(d, j);
  }
  return out;
}

MatrixXd phi_jacobian(const CellTable& table, const NuisanceSet& eta) {
  const Moments mo(table);
  const auto& s = mo.s;
  const PhiLayout lay{s};
  const auto alpha = alpha_of(eta);
  MatrixXd jac(eta.size(), lay.size());
  for (int d = 0; d < 2; ++d) {
    const MatrixXd gy = mo.py[d] * alpha[d];
    const MatrixXd gx = mo.px[d] * alpha[d];
    for (int k = 0; k < s.k; ++k)
      for (int x = 0; x < s.m_x; ++x)
        for (int y = 0; y < s.m_y; ++y) {
          const int r = s.row(y, x);
          AlphaGrad g(s.k);
          for (int j = 0; j < s.k; ++j) {
            g.g_alpha[d](j, k) = mo.pd[d](r, j) - mo.scale * (mo.py[d](y, j) * gx(x, k) + gy(y, k) * mo.px[d](x, j)) +
                                 2.0 * mo.corr * alpha[d](j, k) * mo.pd[d](r, j);
          }
          jac.col(lay.a(y, x, d, k)) = g.chain(eta);
        }
    for (int x = 0; x < s.m_x; ++x) {
      AlphaGrad g(s.k);
      for (int k = 0; k < s.k; ++k) {
        g.g_alpha[d].col(k) = -eta.p_u[k] * mo.px[d].row(x).transpose();
        g.g_pu[k] = -gx(x, k);
      }
      jac.col(lay.b(d, x)) = g.chain(eta);
    }
    for (int j = 0; j < s.k; ++j) {
      AlphaGrad g(s.k);
      g.g_p(d, j) = -1.0;
      jac.col(lay.c(d, j)) = g.chain(eta);
    }
  }
  return jac;
}

Jacobians build_jacobians(const CellTable& table, const NuisanceSet& eta, const PairFunctional& m) {
  return {phi_jacobian(table, eta), m.gradient(table)};
}

namespace {

struct Projector {
  MatrixXd jac;
  Eigen::LDLT<MatrixXd> ldlt;
  bool degraded = false;

  explicit Projector(const MatrixXd& dphi) : jac(dphi) {
    MatrixXd gram = dphi * dphi.transpose();
    const Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram, Eigen::EigenvaluesOnly);
    const VectorXd ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    if (!(top > 0.0) || ev.minCoeff() <= 1e-14 * top) {
      degraded = true;
      const double ridge = 1e-10 * std::max(gram.trace(), 1e-300);
      gram.diagonal().array() += ridge;
    }
    ldlt.compute(gram);
  }

  VectorXd mu(const VectorXd& dm) const { return jac.transpose() * ldlt.solve(dm); }
};

}  // namespace

MuResult compute_mu(const MatrixXd& dphi, const VectorXd& dm) {
  if (dphi.rows() != dm.size()) throw ConfigError("compute_mu: dimension mismatch");
  const Projector proj(dphi);
  return {proj.mu(dm), proj.degraded};
}

// ----------------------------------------------------------- pair evaluation

OrthogonalScore::OrthogonalScore(const CellShape& shape, const NuisanceSet& eta, const VectorXd& mu)
    : shape_(shape), eta_(&eta), mu_(mu), alpha_(alpha_of(eta)) {
  const PhiLayout lay{shape};
  if (mu.size() != lay.size()) throw ConfigError("multiplier length does not match phi");
  for (int d = 0; d < 2; ++d)
    for (int j = 0; j < shape.k; ++j) constant_ -= mu[lay.c(d, j)] * eta.p(d, j);
}

double OrthogonalScore::linear(const Cell& a) const {
  const PhiLayout lay{shape_};
  double v = 0.0;
  double pu_alpha = 0.0;
  for (int k = 0; k < shape_.k; ++k) {
    const double al = alpha_[a.d](a.z, k);
    v += al * mu_[lay.a(a.y, a.x, a.d, k)];
    pu_alpha += eta_->p_u[k] * al;
  }
  v += mu_[lay.b(0, a.x)] + mu_[lay.b(1, a.x)];
  v -= mu_[lay.b(a.d, a.x)] * pu_alpha;
  v += mu_[lay.c(a.d, a.z)];
  return 0.5 * v;
}

double OrthogonalScore::correction(const Cell& a, const Cell& b) const {
  double v = linear(a) + linear(b) + constant_;
  if (a.d == b.d) {
    const PhiLayout lay{shape_};
    double q = 0.0;
    for (int k = 0; k < shape_.k; ++k) {
      q += alpha_[a.d](a.z, k) * alpha_[b.d](b.z, k) *
           (mu_[lay.a(a.y, b.x, a.d, k)] + mu_[lay.a(b.y, a.x, a.d, k)]);
    }
    v -= 0.5 * q;
  }
  return v;
}

OrthogonalEstimate orthogonal_estimate(const CellTable& table, const NuisanceSet& eta,
                                       const std::vector<const PairFunctional*>& functionals) {
  const Projector proj(phi_jacobian(table, eta));
  OrthogonalEstimate out;
  out.degraded = proj.degraded;
  std::vector<OrthogonalScore> scores;
  for (const auto* f : functionals) {
    out.mu.push_back(proj.mu(f->gradient(table)));
    scores.emplace_back(table.shape, eta, out.mu.back());
  }
  const int t = static_cast<int>(functionals.size());
  const auto agg = aggregate_pairs(table, t, [&](const Cell& a, const Cell& b) {
    VectorXd h(t);
    for (int i = 0; i < t; ++i) h[i] = functionals[i]->kernel(a, b) - scores[i].correction(a, b);
    return h;
  });
  out.theta = agg.theta.row(0).transpose();
  out.sigma = agg.sigma;
  return out;
}

double standard_error(double sigma2, double n, VarianceConvention convention) {
  if (!(n > 0.0)) return 0.0;
  const double se = std::sqrt(std::max(sigma2, 0.0) / n);
  return convention == VarianceConvention::hoeffding ? 2.0 * se : se;
}

std::vector<DteEstimate> estimate_grid(const CellTable& table, const NuisanceSet& eta,
                                       const std::vector<Target>& targets, const DteOptions& options) {
  if (static_cast<int>(table.y_scores.size()) != table.shape.m_y) {
    throw ConfigError("the cell table needs one outcome score per Y cell");
  }
  std::vector<std::unique_ptr<PairFunctional>> owned;
  std::vector<const PairFunctional*> fs;
  for (const auto& t : targets) {
    owned.push_back(make_target_functional(t, table.y_scores, eta));
    fs.push_back(owned.back().get());
  }
  const auto est = orthogonal_estimate(table, eta, fs);
  std::vector<DteEstimate> out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    DteEstimate e;
    e.target = targets[i];
    e.theta = est.theta[static_cast<Index>(i)];
    e.theta_clamped = std::clamp(e.theta, 0.0, 1.0);
    e.sigma2 = est.sigma(static_cast<Index>(i), static_cast<Index>(i));
    e.se = standard_error(e.sigma2, table.n, options.variance);
    e.ci_lo = e.theta - options.z_crit * e.se;
    e.ci_hi = e.theta + options.z_crit * e.se;
    e.degraded = est.degraded;
    e.mu = est.mu[i];
    out.push_back(std::move(e));
  }
  return out;
}

DteEstimate estimate_theta(const CellTable& table, const NuisanceSet& eta, const Target& target,
                           const DteOptions& options) {
  return estimate_grid(table, eta, {target}, options).front();
}

DteEstimate estimate_theta(const CellTable& table, const MixtureFit& fit, const Target& target,
                           const DteOptions& options) {
  return estimate_theta(table, make_nuisance(fit, table, options.cond_cap), target, options);
}

LiteralEstimate literal_u_statistic(const DiscreteDataset& data, const NuisanceSet& eta, const Target& target,
                                    const VectorXd& mu) {
  const auto m = make_target_functional(target, data.y_scores, eta);
  const int n = data.n;
  std::vector<Cell> cells(n);
  for (int i = 0; i < n; ++i) cells[i] = Cell{data.y_cell[i], data.d[i], data.x_cell[i], data.z_cell[i]};
  std::vector<double> row(n, 0.0);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double h = m->kernel(cells[i], cells[j]) - mu.dot(build_phi(cells[i], cells[j], data.shape, eta));
      row[i] += h;
      row[j] += h;
      total += h;
    }
  }
  LiteralEstimate out;
  out.theta = total / (0.5 * n * (n - 1.0));
  for (int i = 0; i < n; ++i) {
    const double p1 = row[i] / (n - 1.0) - out.theta;
    out.sigma2 += p1 * p1;
  }
  out.sigma2 /= n;
  return out;
}

// -------------------------------------------------------------------- bounds

VectorXd arm_cdf(const CellTable& t, int d) {
  const auto& s = t.shape;
  VectorXd pmf = VectorXd::Zero(s.m_y);
  for (int y = 0; y < s.m_y; ++y)
    for (int x = 0; x < s.m_x; ++x)
      for (int z = 0; z < s.k; ++z) pmf[y] += t.prob(s.index(y, d, x, z));
  const double total = pmf.sum();
  if (!(total > 0.0)) throw InsufficientSupport("no observations with d=" + std::to_string(d));
  VectorXd cdf(s.m_y);
  double run = 0.0;
  for (int y = 0; y < s.m_y; ++y) {
    run += pmf[y] / total;
    cdf[y] = run;
  }
  return cdf;
}

namespace {

// Right-continuous step CDF through (scores[i], cdf[i]); scores ascending.
double step_cdf(const std::vector<double>& scores, const VectorXd& cdf, double t) {
  double v = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (score_leq(scores[i], t)) v = cdf[static_cast<Index>(i)];
  }
  return v;
}

}  // namespace

BoundsEstimate makarov_bounds(const std::vector<double>& scores, const VectorXd& cdf1, const VectorXd& cdf0,
                              double delta) {
  if (static_cast<Index>(scores.size()) != cdf1.size() || cdf1.size() != cdf0.size()) {
    throw ConfigError("makarov_bounds: grid and CDF lengths differ");
  }
  for (Index i = 1; i < cdf1.size(); ++i) {
    if (cdf1[i] < cdf1[i - 1] - 1e-12 || cdf0[i] < cdf0[i - 1] - 1e-12) {
      throw ConfigError("makarov_bounds: CDFs must be nondecreasing");
    }
  }
  std::vector<double> points = scores;
  for (double s : scores) points.push_back(s + delta);
  double sup = 0.0;
  double inf = 0.0;
  for (double y : points) {
    const double diff = step_cdf(scores, cdf1, y) - step_cdf(scores, cdf0, y - delta);
    sup = std::max(sup, diff);
    inf = std::min(inf, diff);
  }
  BoundsEstimate b;
  b.delta = delta;
  b.lower = std::clamp(sup, 0.0, 1.0);
  b.upper = std::clamp(1.0 + inf, 0.0, 1.0);
  return b;
}

}  // namespace ldte
