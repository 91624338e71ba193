#include "ldte/sieve.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "ldte/qp.hpp"
#include "parallel.hpp"

namespace ldte {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

Quadrature gauss_legendre(int n) {
  if (n < 1) throw ConfigError("quadrature needs at least one node");
  Quadrature q;
  q.nodes.resize(n);
  q.weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0;
      double p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) {
        p1 = x;
        p0 = 1.0;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // recompute the derivative at the converged root
    double p0 = 1.0;
    double p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    q.nodes[i] = 0.5 * (1.0 - x);
    q.nodes[n - 1 - i] = 0.5 * (1.0 + x);
    q.weights[i] = 0.5 * w;
    q.weights[n - 1 - i] = 0.5 * w;
  }
  return q;
}

SieveSpec fit_ranges(SieveSpec spec, std::span<const RawRow> rows) {
  if (rows.empty()) throw InputError("no observations");
  auto range = [&](auto get) {
    double lo = get(rows.front());
    double hi = lo;
    for (const auto& r : rows) {
      lo = std::min(lo, get(r));
      hi = std::max(hi, get(r));
    }
    if (!(hi > lo)) hi = lo + 1.0;
    return UnitMap{lo, hi};
  };
  spec.y_map = range([](const RawRow& r) { return r.y; });
  spec.x_map = range([](const RawRow& r) { return r.x; });
  spec.z_map = range([](const RawRow& r) { return r.z; });
  return spec;
}

// ------------------------------------------------------------------ theta

Index SieveTheta::size() const {
  Index s = 0;
  for (const auto& b : blocks) s += b.size();
  return s;
}

VectorXd SieveTheta::vectorize() const {
  VectorXd v(size());
  Index off = 0;
  for (const auto& b : blocks) {
    v.segment(off, b.size()) = b.reshaped();
    off += b.size();
  }
  return v;
}

void SieveTheta::assign(const VectorXd& v) {
  if (v.size() != size()) throw ConfigError("sieve coefficient vector has the wrong length");
  Index off = 0;
  for (auto& b : blocks) {
    b.reshaped() = v.segment(off, b.size());
    off += b.size();
  }
}

SieveTheta SieveTheta::uniform(const SieveSpec& spec) {
  if (std::min({spec.p_y1, spec.p_y0, spec.p_x, spec.p_u, spec.p_z}) < 0) {
    throw ConfigError("sieve degrees must be nonnegative");
  }
  SieveTheta t;
  t[y1] = MatrixXd::Ones(spec.p_y1 + 1, spec.p_u + 1);
  t[y0] = MatrixXd::Ones(spec.p_y0 + 1, spec.p_u + 1);
  t[x] = MatrixXd::Ones(spec.p_x + 1, spec.p_u + 1);
  t[z1] = MatrixXd::Ones(spec.p_u + 1, spec.p_z + 1);
  t[z0] = MatrixXd::Ones(spec.p_u + 1, spec.p_z + 1);
  return t;
}

const char* block_name(int block) {
  static const char* names[] = {"y1", "y0", "x", "z1", "z0"};
  if (block < 0 || block > 4) throw ConfigError("no such sieve block");
  return names[block];
}

// ------------------------------------------------------------ constraints

VectorXd mean_weights(int p) {
  VectorXd w(p + 1);
  for (int j = 0; j <= p; ++j) w[j] = (j + 1.0) / ((p + 1.0) * (p + 2.0));
  return w;
}

namespace {

bool monotone_on(MonotoneArms m, int block) {
  if (block == SieveTheta::y1) return m == MonotoneArms::both || m == MonotoneArms::treated;
  if (block == SieveTheta::y0) return m == MonotoneArms::both || m == MonotoneArms::untreated;
  return false;
}

}  // namespace

SieveConstraints assemble_constraints(const SieveSpec& spec) {
  const SieveTheta shape = SieveTheta::uniform(spec);
  const Index dim = shape.size();
  std::vector<std::pair<VectorXd, double>> eq;
  std::vector<VectorXd> in;
  Index off = 0;
  for (int b = 0; b < 5; ++b) {
    const Index rows = shape[b].rows();
    const Index cols = shape[b].cols();
    for (Index c = 0; c < cols; ++c) {
      VectorXd a = VectorXd::Zero(dim);
      a.segment(off + c * rows, rows).setOnes();
      eq.emplace_back(a, static_cast<double>(rows));
    }
    if (monotone_on(spec.monotone, b)) {
      const VectorXd w = mean_weights(static_cast<int>(rows) - 1);
      for (Index c = 0; c + 1 < cols; ++c) {
        VectorXd a = VectorXd::Zero(dim);
        a.segment(off + c * rows, rows) = w;
        a.segment(off + (c + 1) * rows, rows) = -w;
        in.push_back(a);
      }
    }
    off += shape[b].size();
  }
  SieveConstraints out;
  out.a_eq.resize(static_cast<Index>(eq.size()), dim);
  out.b_eq.resize(static_cast<Index>(eq.size()));
  for (std::size_t i = 0; i < eq.size(); ++i) {
    out.a_eq.row(static_cast<Index>(i)) = eq[i].first.transpose();
    out.b_eq[static_cast<Index>(i)] = eq[i].second;
  }
  out.a_in.resize(static_cast<Index>(in.size()), dim);
  out.b_in = VectorXd::Zero(static_cast<Index>(in.size()));
  for (std::size_t i = 0; i < in.size(); ++i) out.a_in.row(static_cast<Index>(i)) = in[i].transpose();
  return out;
}

double constraint_residual(const SieveTheta& theta, const SieveSpec& spec) {
  const SieveConstraints c = assemble_constraints(spec);
  const VectorXd v = theta.vectorize();
  double r = std::max(0.0, -v.minCoeff());
  if (c.a_eq.rows() > 0) r = std::max(r, (c.a_eq * v - c.b_eq).cwiseAbs().maxCoeff());
  if (c.a_in.rows() > 0) r = std::max(r, (c.a_in * v - c.b_in).maxCoeff());
  return r;
}

double block_density(const MatrixXd& block, double t, double s) {
  const VectorXd bt = bernstein_basis(static_cast<int>(block.rows()) - 1, t);
  const VectorXd bs = bernstein_basis(static_cast<int>(block.cols()) - 1, s);
  return bt.dot(block * bs);
}

// ------------------------------------------------------------- likelihood

namespace {

double to_unit(const UnitMap& m, double v, const char* what) {
  if (!(m.hi > m.lo)) throw ConfigError(std::string("empty range for ") + what);
  const double t = m(v);
  constexpr double slack = 1e-12;
  if (!(t >= -slack && t <= 1.0 + slack)) {
    throw InputError(std::string(what) + " value " + std::to_string(v) + " lies outside the sieve range");
  }
  return std::clamp(t, 0.0, 1.0);
}

// Basis values at every observation, split by arm.
struct Arm {
  std::vector<int> index;  // original row positions
  MatrixXd by;             // n_d x (p_yd + 1)
  MatrixXd bx;             // n_d x (p_x + 1)
  MatrixXd bz;             // n_d x (p_z + 1)
};

struct Prepared {
  std::array<Arm, 2> arm;
  Quadrature quad;
  MatrixXd bu;  // nodes x (p_u + 1)
  int n = 0;
};

Prepared prepare(std::span<const RawRow> rows, const SieveSpec& spec) {
  if (rows.empty()) throw InputError("no observations");
  Prepared p;
  p.n = static_cast<int>(rows.size());
  p.quad = gauss_legendre(spec.node_count());
  p.bu.resize(p.quad.nodes.size(), spec.p_u + 1);
  for (Index q = 0; q < p.quad.nodes.size(); ++q) p.bu.row(q) = bernstein_basis(spec.p_u, p.quad.nodes[q]).transpose();
  std::array<int, 2> count{0, 0};
  for (const auto& r : rows) {
    if (r.d != 0 && r.d != 1) throw InputError("treatment must be 0 or 1");
    ++count[static_cast<std::size_t>(r.d)];
  }
  for (int d = 0; d < 2; ++d) {
    auto& a = p.arm[static_cast<std::size_t>(d)];
    const int py = d == 1 ? spec.p_y1 : spec.p_y0;
    a.by.resize(count[static_cast<std::size_t>(d)], py + 1);
    a.bx.resize(count[static_cast<std::size_t>(d)], spec.p_x + 1);
    a.bz.resize(count[static_cast<std::size_t>(d)], spec.p_z + 1);
  }
  std::array<Index, 2> at{0, 0};
  for (int i = 0; i < p.n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    auto& a = p.arm[static_cast<std::size_t>(r.d)];
    const Index k = at[static_cast<std::size_t>(r.d)]++;
    a.index.push_back(i);
    a.by.row(k) = bernstein_basis(r.d == 1 ? spec.p_y1 : spec.p_y0, to_unit(spec.y_map, r.y, "y")).transpose();
    a.bx.row(k) = bernstein_basis(spec.p_x, to_unit(spec.x_map, r.x, "x")).transpose();
    a.bz.row(k) = bernstein_basis(spec.p_z, to_unit(spec.z_map, r.z, "z")).transpose();
  }
  return p;
}

struct Offsets {
  std::array<Index, 5> at{};
};

Offsets offsets(const SieveTheta& t) {
  Offsets o;
  Index off = 0;
  for (int b = 0; b < 5; ++b) {
    o.at[static_cast<std::size_t>(b)] = off;
    off += t[b].size();
  }
  return o;
}

struct Evaluation {
  double value = 0.0;
  VectorXd gradient;
  MatrixXd scores;  // n x dim, filled on request
  int offending = -1;
};

// Fixed row blocks, so the reduction order does not depend on the worker count.
constexpr Index kChunkRows = 256;

struct Chunk {
  int d = 0;
  Index start = 0;
  Index rows = 0;
};

Evaluation evaluate(const SieveTheta& th, const Prepared& p, bool want_scores, int workers) {
  const Index dim = th.size();
  const Offsets off = offsets(th);
  const VectorXd& w = p.quad.weights;

  std::vector<Chunk> chunks;
  for (int d = 0; d < 2; ++d) {
    const auto n_d = static_cast<Index>(p.arm[static_cast<std::size_t>(d)].index.size());
    for (Index s = 0; s < n_d; s += kChunkRows) chunks.push_back({d, s, std::min(kChunkRows, n_d - s)});
  }
  std::vector<Evaluation> part(chunks.size());
  MatrixXd scores;
  if (want_scores) scores = MatrixXd::Zero(p.n, dim);

  detail::parallel_for(static_cast<int>(chunks.size()), workers, [&](int c) {
    const Chunk& ch = chunks[static_cast<std::size_t>(c)];
    const Arm& a = p.arm[static_cast<std::size_t>(ch.d)];
    Evaluation& ev = part[static_cast<std::size_t>(c)];
    ev.gradient = VectorXd::Zero(dim);
    const int by_block = ch.d == 1 ? SieveTheta::y1 : SieveTheta::y0;
    const int bz_block = ch.d == 1 ? SieveTheta::z1 : SieveTheta::z0;
    const auto by = a.by.middleRows(ch.start, ch.rows);
    const auto bx = a.bx.middleRows(ch.start, ch.rows);
    const auto bz = a.bz.middleRows(ch.start, ch.rows);
    // factor values at (observation, node)
    const MatrixXd fy = (by * th[by_block]) * p.bu.transpose();
    const MatrixXd fx = (bx * th[SieveTheta::x]) * p.bu.transpose();
    const MatrixXd fu = (bz * th[bz_block].transpose()) * p.bu.transpose();
    const VectorXd lik = fy.cwiseProduct(fx).cwiseProduct(fu) * w;
    for (Index i = 0; i < lik.size(); ++i) {
      if (!(lik[i] > 0.0)) {
        const int row = a.index[static_cast<std::size_t>(ch.start + i)];
        if (ev.offending < 0 || row < ev.offending) ev.offending = row;
      }
    }
    if (ev.offending >= 0) return;
    ev.value = lik.array().log().sum();
    // g(i, q) = w_q / L_i
    const MatrixXd g = lik.cwiseInverse() * w.transpose();
    const MatrixXd ay = g.cwiseProduct(fx).cwiseProduct(fu) * p.bu;  // rows x (p_u + 1)
    const MatrixXd ax = g.cwiseProduct(fy).cwiseProduct(fu) * p.bu;
    const MatrixXd az = g.cwiseProduct(fy).cwiseProduct(fx) * p.bu;
    const MatrixXd gy = by.transpose() * ay;
    const MatrixXd gx = bx.transpose() * ax;
    const MatrixXd gz = az.transpose() * bz;
    ev.gradient.segment(off.at[static_cast<std::size_t>(by_block)], gy.size()) += gy.reshaped();
    ev.gradient.segment(off.at[SieveTheta::x], gx.size()) += gx.reshaped();
    ev.gradient.segment(off.at[static_cast<std::size_t>(bz_block)], gz.size()) += gz.reshaped();
    if (want_scores) {
      // each chunk owns distinct rows of `scores`
      for (Index i = 0; i < lik.size(); ++i) {
        auto s = scores.row(a.index[static_cast<std::size_t>(ch.start + i)]);
        const MatrixXd oy = by.row(i).transpose() * ay.row(i);
        const MatrixXd ox = bx.row(i).transpose() * ax.row(i);
        const MatrixXd oz = az.row(i).transpose() * bz.row(i);
        s.segment(off.at[static_cast<std::size_t>(by_block)], oy.size()) = oy.reshaped().transpose();
        s.segment(off.at[SieveTheta::x], ox.size()) = ox.reshaped().transpose();
        s.segment(off.at[static_cast<std::size_t>(bz_block)], oz.size()) = oz.reshaped().transpose();
      }
    }
  });

  Evaluation ev;
  ev.gradient = VectorXd::Zero(dim);
  for (const auto& e : part) {
    if (e.offending >= 0 && (ev.offending < 0 || e.offending < ev.offending)) ev.offending = e.offending;
    if (ev.offending >= 0) continue;
    ev.value += e.value;
    ev.gradient += e.gradient;
  }
  if (ev.offending >= 0) ev.value = -std::numeric_limits<double>::infinity();
  ev.scores = std::move(scores);
  return ev;
}

void check_shapes(const SieveTheta& th, const SieveSpec& spec) {
  const SieveTheta ref = SieveTheta::uniform(spec);
  for (int b = 0; b < 5; ++b) {
    if (th[b].rows() != ref[b].rows() || th[b].cols() != ref[b].cols()) {
      throw ConfigError(std::string("sieve block ") + block_name(b) + " does not match the spec degrees");
    }
  }
}

}  // namespace

double sieve_loglik(const SieveTheta& theta, std::span<const RawRow> rows, const SieveSpec& spec, int workers) {
  return sieve_loglik_gradient(theta, rows, spec, workers).value;
}

LoglikEval sieve_loglik_gradient(const SieveTheta& theta, std::span<const RawRow> rows, const SieveSpec& spec,
                                 int workers) {
  check_shapes(theta, spec);
  const Evaluation ev = evaluate(theta, prepare(rows, spec), false, workers);
  LoglikEval out;
  out.value = ev.value;
  out.gradient = ev.gradient;
  out.offending = ev.offending;
  return out;
}

// ---------------------------------------------------------------- fitting

namespace {

SieveTheta random_start(const SieveSpec& spec, std::mt19937_64& rng) {
  SieveTheta t = SieveTheta::uniform(spec);
  std::gamma_distribution<double> gam(1.0, 1.0);
  for (int b = 0; b < 5; ++b) {
    MatrixXd& m = t[b];
    for (Index c = 0; c < m.cols(); ++c) {
      for (Index r = 0; r < m.rows(); ++r) m(r, c) = gam(rng);
      m.col(c) *= static_cast<double>(m.rows()) / m.col(c).sum();
    }
    if (monotone_on(spec.monotone, b)) {
      const VectorXd w = mean_weights(static_cast<int>(m.rows()) - 1);
      std::vector<Index> order(static_cast<std::size_t>(m.cols()));
      for (Index c = 0; c < m.cols(); ++c) order[static_cast<std::size_t>(c)] = c;
      std::stable_sort(order.begin(), order.end(),
                       [&](Index a, Index c) { return w.dot(m.col(a)) < w.dot(m.col(c)); });
      MatrixXd sorted(m.rows(), m.cols());
      for (Index c = 0; c < m.cols(); ++c) sorted.col(c) = m.col(order[static_cast<std::size_t>(c)]);
      m = sorted;
    }
    // keep away from the boundary so every observation has positive likelihood
    m = 0.5 * m + 0.5 * MatrixXd::Ones(m.rows(), m.cols());
  }
  return t;
}

struct Ascent {
  SieveTheta theta;
  double loglik = 0.0;
  int iterations = 0;
  double gain = 0.0;
  double gradient_norm = 0.0;
  bool converged = false;
};

Ascent ascend(SieveTheta theta, const Prepared& prep, const SieveConstraints& cons, const SieveFitConfig& cfg) {
  Ascent out;
  VectorXd v = theta.vectorize();
  Evaluation ev = evaluate(theta, prep, true, cfg.workers);
  if (ev.offending >= 0) throw EstimationError("sieve start has zero likelihood at observation " +
                                               std::to_string(ev.offending + 1));
  const Index dim = v.size();
  for (int it = 0; it < cfg.max_iter; ++it) {
    out.iterations = it + 1;
    MatrixXd h = ev.scores.transpose() * ev.scores;
    const double ridge = 1e-8 * std::max(h.trace() / static_cast<double>(dim), 1.0);
    h.diagonal().array() += ridge;

    QpProblem qp;
    qp.Q = h;
    qp.c = -(h * v + ev.gradient);
    qp.A_eq = cons.a_eq;
    qp.b_eq = cons.b_eq;
    qp.A_in = cons.a_in;
    qp.b_in = cons.b_in;
    qp.nonneg = true;
    const QpSolution sol = solve_qp(qp);
    if (!sol.ok() && sol.status != QpStatus::max_iter) {
      throw EstimationError(std::string("sieve step QP failed: ") + to_string(sol.status));
    }
    const VectorXd step = sol.x - v;
    const double gain = ev.gradient.dot(step);
    out.gain = gain;
    if (gain <= cfg.tol * (1.0 + std::abs(ev.value))) {
      out.converged = true;
      break;
    }
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      VectorXd trial = (v + t * step).cwiseMax(0.0);
      SieveTheta cand = theta;
      cand.assign(trial);
      Evaluation e2 = evaluate(cand, prep, true, cfg.workers);
      if (e2.offending < 0 && e2.value >= ev.value + 1e-4 * t * gain) {
        v = std::move(trial);
        theta = std::move(cand);
        ev = std::move(e2);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // no ascent along the model step: first-order stationary up to rounding
      out.converged = gain <= 1e-6 * (1.0 + std::abs(ev.value));
      break;
    }
  }
  out.theta = std::move(theta);
  out.loglik = ev.value;
  out.gradient_norm = ev.gradient.norm();
  return out;
}

}  // namespace

SieveFit fit_sieve(std::span<const RawRow> rows, const SieveSpec& spec, const SieveFitConfig& config) {
  if (config.restarts < 1) throw ConfigError("sieve restarts must be at least 1");
  const Prepared prep = prepare(rows, spec);
  const SieveConstraints cons = assemble_constraints(spec);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    0x53495645u};
  std::mt19937_64 rng(seq);

  SieveFit best;
  bool have = false;
  std::string last_error;
  for (int r = 0; r < config.restarts; ++r) {
    const SieveTheta start = r == 0 ? SieveTheta::uniform(spec) : random_start(spec, rng);
    try {
      Ascent a = ascend(start, prep, cons, config);
      if (!have || a.loglik > best.loglik) {
        best.theta = std::move(a.theta);
        best.loglik = a.loglik;
        best.iterations = a.iterations;
        best.predicted_gain = a.gain;
        best.gradient_norm = a.gradient_norm;
        best.converged = a.converged;
        best.best_restart = r;
        have = true;
      }
    } catch (const Error& e) {
      last_error = e.what();
    }
  }
  if (!have) throw EstimationError("no sieve start produced a feasible ascent: " + last_error);
  best.constraint_residual = constraint_residual(best.theta, spec);
  return best;
}

// -------------------------------------------------------------------- DTE

namespace {

// CDF of a block column c (outcome coefficients) at t in [0, 1]:
// integral of b_{j,p} over [0, t] is sum over i > j of b_{i,p+1}(t) / (p + 1).
double column_cdf(const VectorXd& c, double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int p = static_cast<int>(c.size()) - 1;
  const VectorXd b = bernstein_basis(p + 1, t);
  double run = 0.0;
  double f = 0.0;
  for (int i = 1; i <= p + 1; ++i) {
    run += c[i - 1];
    f += run * b[i];
  }
  return f / (p + 1.0);
}

double column_density(const VectorXd& c, double t) {
  return bernstein_basis(static_cast<int>(c.size()) - 1, t).dot(c);
}

// integral over t in [0, 1] of f0(t) F1(t + shift)
double difference_cdf(const VectorXd& c1, const VectorXd& c0, double shift) {
  const double a = std::max(0.0, -shift);
  const double b = std::min(1.0, 1.0 - shift);
  double v = 0.0;
  // F1 = 1 once t + shift >= 1
  const double top = std::clamp(1.0 - shift, 0.0, 1.0);
  v += 1.0 - column_cdf(c0, top);
  if (b > a) {
    const int deg = static_cast<int>(c0.size() + c1.size());
    const Quadrature q = gauss_legendre(deg / 2 + 1);
    for (Index i = 0; i < q.nodes.size(); ++i) {
      const double t = a + (b - a) * q.nodes[i];
      v += (b - a) * q.weights[i] * column_density(c0, t) * column_cdf(c1, t + shift);
    }
  }
  return v;
}

}  // namespace

double sieve_dte(const SieveTheta& theta, std::span<const RawRow> rows, const SieveSpec& spec, const Target& target) {
  check_shapes(theta, spec);
  const Prepared prep = prepare(rows, spec);
  // sample average of f_{U | D_i, Z_i} at the u nodes
  VectorXd fbar = VectorXd::Zero(prep.bu.rows());
  for (int d = 0; d < 2; ++d) {
    const Arm& a = prep.arm[static_cast<std::size_t>(d)];
    if (a.index.empty()) continue;
    const VectorXd zbar = a.bz.colwise().sum().transpose() / static_cast<double>(prep.n);
    fbar += prep.bu * (theta[d == 1 ? SieveTheta::z1 : SieveTheta::z0] * zbar);
  }
  double v = 0.0;
  for (Index q = 0; q < prep.bu.rows(); ++q) {
    const VectorXd bu = prep.bu.row(q).transpose();
    const VectorXd c1 = theta[SieveTheta::y1] * bu;
    const VectorXd c0 = theta[SieveTheta::y0] * bu;
    double g = 0.0;
    if (target.kind == Target::Kind::marginal) {
      g = difference_cdf(c1, c0, target.delta / spec.y_map.scale());
    } else {
      g = column_cdf(c1, spec.y_map(target.y1)) * column_cdf(c0, spec.y_map(target.y0));
    }
    v += prep.quad.weights[q] * g * fbar[q];
  }
  return v;
}

}  // namespace ldte
