#include "ldte/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "parallel.hpp"

namespace ldte {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<double> default_values(Index count) {
  std::vector<double> v(static_cast<std::size_t>(count));
  std::iota(v.begin(), v.end(), 1.0);
  return v;
}

void check_stochastic(const MatrixXd& m, const char* what) {
  if (m.size() == 0) throw InputError(std::string("DGP field '") + what + "' is empty");
  if ((m.array() < 0.0).any()) throw InputError(std::string("DGP field '") + what + "' has negative entries");
  for (Index c = 0; c < m.cols(); ++c) {
    if (!(m.col(c).sum() > 0.0)) throw InputError(std::string("DGP field '") + what + "' has a zero column");
  }
}

MatrixXd normalize_columns(MatrixXd m) {
  for (Index c = 0; c < m.cols(); ++c) m.col(c) /= m.col(c).sum();
  return m;
}

void check_support(const std::vector<double>& values, Index rows, const char* what) {
  if (static_cast<Index>(values.size()) != rows) {
    throw InputError(std::string("DGP support '") + what + "' does not match its matrix rows");
  }
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i] > values[i - 1])) throw InputError(std::string("DGP support '") + what + "' is not increasing");
  }
}

// Cell index of every raw value.
std::vector<int> cell_map(const std::vector<double>& values, const std::vector<double>& cuts) {
  const Partition part(cuts);
  std::vector<int> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(part.cell_of(v));
  return out;
}

MatrixXd collapse_rows(const MatrixXd& m, const std::vector<int>& map, int cells) {
  MatrixXd out = MatrixXd::Zero(cells, m.cols());
  for (Index r = 0; r < m.rows(); ++r) out.row(map[static_cast<std::size_t>(r)]) += m.row(r);
  return out;
}

// Portable uniform on [0, 1) from the top 53 bits.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int draw(std::mt19937_64& rng, const Eigen::Ref<const VectorXd>& p) {
  const double u = uniform01(rng);
  double run = 0.0;
  const auto last = static_cast<int>(p.size()) - 1;
  for (int i = 0; i < last; ++i) {
    run += p[i];
    if (u < run) return i;
  }
  return last;
}

std::uint64_t replication_seed(std::uint64_t seed, std::uint64_t r) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(r >> 32), 0x52455053u};
  std::mt19937_64 rng(seq);
  return rng();
}

struct Replication {
  bool ok = false;
  std::string error;
  std::vector<DteEstimate> estimates;
  bool falsify_ok = false;
  double p_value = 1.0;
};

}  // namespace

DgpSpec normalize(DgpSpec spec) {
  const Index k = spec.p_u.size();
  if (k < 1) throw InputError("DGP p_u is empty");
  check_stochastic(spec.gamma_x, "gamma_x");
  check_stochastic(spec.gamma_y0, "gamma_y0");
  check_stochastic(spec.gamma_y1, "gamma_y1");
  check_stochastic(spec.lambda, "lambda");
  if (spec.gamma_x.cols() != k || spec.gamma_y0.cols() != k || spec.gamma_y1.cols() != k ||
      spec.lambda.rows() != k) {
    throw InputError("DGP matrices must have K = len(p_u) latent columns");
  }
  if (spec.gamma_y0.rows() != spec.gamma_y1.rows()) throw InputError("gamma_y0 and gamma_y1 differ in rows");
  if (!(spec.p_d1 > 0.0 && spec.p_d1 < 1.0)) throw InputError("p_d1 must lie in (0, 1)");
  if ((spec.p_u.array() < 0.0).any() || !(spec.p_u.sum() > 0.0)) throw InputError("p_u must be a probability vector");

  spec.gamma_x = normalize_columns(spec.gamma_x);
  spec.gamma_y0 = normalize_columns(spec.gamma_y0);
  spec.gamma_y1 = normalize_columns(spec.gamma_y1);
  spec.lambda = normalize_columns(spec.lambda);
  spec.p_u /= spec.p_u.sum();

  VectorXd pz;
  if (spec.p_z) {
    pz = *spec.p_z;
    if (pz.size() != spec.lambda.cols() || (pz.array() < 0.0).any() || !(pz.sum() > 0.0)) {
      throw InputError("p_z must be a probability vector with one entry per lambda column");
    }
  } else {
    if (spec.lambda.cols() != k) throw InputError("deriving p_z needs a square lambda");
    pz = spec.lambda.fullPivLu().solve(spec.p_u);
    const Index bad = [&] {
      for (Index i = 0; i < pz.size(); ++i)
        if (pz[i] < -1e-12) return i;
      return Index{-1};
    }();
    if (bad >= 0) {
      throw InputError("lambda p_z = p_u has no nonnegative solution (p_z[" + std::to_string(bad + 1) +
                       "] = " + std::to_string(pz[bad]) + ")");
    }
    pz = pz.cwiseMax(0.0);
  }
  pz /= pz.sum();
  spec.p_z = pz;
  spec.p_u = spec.lambda * pz;

  if (spec.x_values.empty()) spec.x_values = default_values(spec.gamma_x.rows());
  if (spec.y_values.empty()) spec.y_values = default_values(spec.gamma_y0.rows());
  if (spec.z_values.empty()) spec.z_values = default_values(spec.lambda.cols());
  check_support(spec.x_values, spec.gamma_x.rows(), "x_values");
  check_support(spec.y_values, spec.gamma_y0.rows(), "y_values");
  check_support(spec.z_values, spec.lambda.cols(), "z_values");
  if (spec.x_cuts.empty()) spec.x_cuts.assign(spec.x_values.begin(), spec.x_values.end() - 1);
  if (spec.y_cuts.empty()) spec.y_cuts.assign(spec.y_values.begin(), spec.y_values.end() - 1);
  if (spec.z_cuts.empty()) spec.z_cuts.assign(spec.z_values.begin(), spec.z_values.end() - 1);

  if (Partition(spec.z_cuts).cell_count() != k) throw InputError("the Z partition must have exactly K cells");
  return spec;
}

CellFactors cell_factors(const DgpSpec& dgp) {
  const int k = dgp.k();
  const Partition px(dgp.x_cuts);
  const Partition py(dgp.y_cuts);
  const Partition pz(dgp.z_cuts);
  CellFactors f;
  f.gamma_x = collapse_rows(dgp.gamma_x, cell_map(dgp.x_values, dgp.x_cuts), px.cell_count());
  f.gamma_y0 = collapse_rows(dgp.gamma_y0, cell_map(dgp.y_values, dgp.y_cuts), py.cell_count());
  f.gamma_y1 = collapse_rows(dgp.gamma_y1, cell_map(dgp.y_values, dgp.y_cuts), py.cell_count());
  f.p_u = dgp.p_u;

  // P(U | Z cell) mixes the raw columns by their Z probabilities
  const VectorXd& raw_pz = *dgp.p_z;
  const auto zmap = cell_map(dgp.z_values, dgp.z_cuts);
  f.p_z = VectorXd::Zero(k);
  f.lambda = MatrixXd::Zero(k, k);
  for (Index j = 0; j < raw_pz.size(); ++j) {
    const int c = zmap[static_cast<std::size_t>(j)];
    f.p_z[c] += raw_pz[j];
    f.lambda.col(c) += raw_pz[j] * dgp.lambda.col(j);
  }
  for (int c = 0; c < k; ++c) {
    if (!(f.p_z[c] > 0.0)) throw InputError("Z cell " + std::to_string(c + 1) + " has zero probability");
    f.lambda.col(c) /= f.p_z[c];
  }
  f.y_scores = default_values(py.cell_count());
  return f;
}

CellTable population_table(const DgpSpec& dgp, double nominal_n) {
  const CellFactors f = cell_factors(dgp);
  CellTable t;
  t.shape = CellShape{static_cast<int>(f.gamma_y0.rows()), static_cast<int>(f.gamma_x.rows()), dgp.k()};
  t.population = true;
  t.n = nominal_n;
  t.y_scores = f.y_scores;
  t.weight = VectorXd::Zero(t.shape.size());
  const auto& s = t.shape;
  for (int d = 0; d < 2; ++d) {
    const double pd = d == 1 ? dgp.p_d1 : 1.0 - dgp.p_d1;
    const MatrixXd& gy = d == 1 ? f.gamma_y1 : f.gamma_y0;
    for (int z = 0; z < s.k; ++z)
      for (int y = 0; y < s.m_y; ++y)
        for (int x = 0; x < s.m_x; ++x) {
          double v = 0.0;
          for (int u = 0; u < s.k; ++u) v += f.lambda(u, z) * gy(y, u) * f.gamma_x(x, u);
          t.weight[s.index(y, d, x, z)] = pd * f.p_z[z] * v;
        }
  }
  return t;
}

NuisanceSet true_nuisance(const DgpSpec& dgp) {
  const CellFactors f = cell_factors(dgp);
  NuisanceSet eta;
  eta.k = dgp.k();
  const MatrixXd inv = f.lambda.partialPivLu().inverse();
  eta.lambda_tilde = {inv, inv};
  eta.p_u = f.p_u;
  eta.p_dz.resize(2 * eta.k);
  eta.p_dz.head(eta.k) = (1.0 - dgp.p_d1) * f.p_z;
  eta.p_dz.tail(eta.k) = dgp.p_d1 * f.p_z;
  return eta;
}

double true_dte(const DgpSpec& dgp, double delta) {
  const CellFactors f = cell_factors(dgp);
  double v = 0.0;
  for (int k = 0; k < dgp.k(); ++k)
    for (std::size_t y1 = 0; y1 < f.y_scores.size(); ++y1)
      for (std::size_t y0 = 0; y0 < f.y_scores.size(); ++y0)
        if (score_leq(f.y_scores[y1] - f.y_scores[y0], delta))
          v += f.p_u[k] * f.gamma_y1(static_cast<Index>(y1), k) * f.gamma_y0(static_cast<Index>(y0), k);
  return v;
}

double true_joint(const DgpSpec& dgp, double y0, double y1) {
  const CellFactors f = cell_factors(dgp);
  double v = 0.0;
  for (int k = 0; k < dgp.k(); ++k) {
    double c0 = 0.0;
    double c1 = 0.0;
    for (std::size_t y = 0; y < f.y_scores.size(); ++y) {
      if (score_leq(f.y_scores[y], y0)) c0 += f.gamma_y0(static_cast<Index>(y), k);
      if (score_leq(f.y_scores[y], y1)) c1 += f.gamma_y1(static_cast<Index>(y), k);
    }
    v += f.p_u[k] * c0 * c1;
  }
  return v;
}

std::vector<RawRow> sample_rows(const DgpSpec& dgp, int n, std::uint64_t seed, std::uint64_t stream) {
  if (n < 1) throw ConfigError("sample size must be positive");
  if (!dgp.p_z) throw ConfigError("sample needs a normalized DGP");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x53414d50u};
  std::mt19937_64 rng(seq);
  const VectorXd& pz = *dgp.p_z;
  std::vector<RawRow> rows(static_cast<std::size_t>(n));
  for (auto& r : rows) {
    const int z = draw(rng, pz);
    const int d = uniform01(rng) < dgp.p_d1 ? 1 : 0;
    const int u = draw(rng, dgp.lambda.col(z));
    const int x = draw(rng, dgp.gamma_x.col(u));
    const int y0 = draw(rng, dgp.gamma_y0.col(u));
    const int y1 = draw(rng, dgp.gamma_y1.col(u));
    r.z = dgp.z_values[static_cast<std::size_t>(z)];
    r.d = d;
    r.x = dgp.x_values[static_cast<std::size_t>(x)];
    r.y = dgp.y_values[static_cast<std::size_t>(d == 1 ? y1 : y0)];
  }
  return rows;
}

DiscreteDataset sample(const DgpSpec& dgp, int n, std::uint64_t seed, std::uint64_t stream) {
  const auto rows = sample_rows(dgp, n, seed, stream);
  const Partition py(dgp.y_cuts);
  return discretize(rows, py, Partition(dgp.x_cuts), Partition(dgp.z_cuts), default_values(py.cell_count()));
}

StudyReport run_study(const DgpSpec& dgp, const StudyConfig& config) {
  if (config.reps < 1) throw ConfigError("reps must be at least 1");
  if (config.deltas.empty()) throw ConfigError("the delta grid is empty");
  std::vector<Target> targets;
  for (double d : config.deltas) targets.push_back(Target::marginal_at(d));

  std::vector<Replication> reps(static_cast<std::size_t>(config.reps));
  const int outer = std::max(1, config.workers);
  detail::parallel_for(config.reps, outer, [&](int r) {
    Replication& out = reps[static_cast<std::size_t>(r)];
    NmfConfig nmf = config.nmf;
    nmf.k = dgp.k();
    nmf.seed = replication_seed(config.seed, static_cast<std::uint64_t>(r));
    if (outer > 1) nmf.workers = 1;
    try {
      const CellTable table = config.population_mode ? population_table(dgp, config.n)
                                                     : sample(dgp, config.n, config.seed, r).table();
      const MixtureFit f = align(fit(build_h(table, 0), build_h(table, 1), table.shape.m_y, nmf), table.y_scores);
      const NuisanceSet eta = make_nuisance(f, table, config.dte.cond_cap);
      out.estimates = estimate_grid(table, eta, targets, config.dte);
      out.ok = true;
      if (config.falsify) {
        FalsifyConfig fc;
        fc.nmf = nmf;
        fc.variance = config.dte.variance;
        fc.cond_cap = config.dte.cond_cap;
        try {
          out.p_value = falsification_test(table, fc).p_value;
          out.falsify_ok = true;
        } catch (const Error& e) {
          out.error = std::string("falsification: ") + e.what();
        }
      }
    } catch (const Error& e) {
      out.error = e.what();
    }
  });

  StudyReport rep;
  rep.reps = config.reps;
  rep.n = config.n;
  rep.seed = config.seed;
  int rejections = 0;
  for (int r = 0; r < config.reps; ++r) {
    const auto& x = reps[static_cast<std::size_t>(r)];
    if (x.ok) {
      ++rep.succeeded;
      if (x.falsify_ok) {
        ++rep.falsify_count;
        if (x.p_value < 0.05) ++rejections;
      }
    } else {
      ++rep.failed;
    }
    if (!x.error.empty()) rep.failures.push_back("replication " + std::to_string(r) + ": " + x.error);
  }
  rep.rejection_rate = rep.falsify_count > 0 ? static_cast<double>(rejections) / rep.falsify_count : 0.0;

  for (std::size_t i = 0; i < targets.size(); ++i) {
    StudyRow row;
    row.delta = config.deltas[i];
    row.truth = true_dte(dgp, row.delta);
    if (rep.succeeded == 0) {
      rep.rows.push_back(row);
      continue;
    }
    double sum = 0.0;
    double sq = 0.0;
    double se = 0.0;
    int covered = 0;
    for (const auto& x : reps) {
      if (!x.ok) continue;
      const auto& e = x.estimates[i];
      sum += e.theta;
      sq += (e.theta - row.truth) * (e.theta - row.truth);
      se += e.se;
      if (e.ci_lo <= row.truth && row.truth <= e.ci_hi) ++covered;
    }
    const double b = rep.succeeded;
    const double mean = sum / b;
    double var = 0.0;
    for (const auto& x : reps) {
      if (x.ok) var += (x.estimates[i].theta - mean) * (x.estimates[i].theta - mean);
    }
    row.bias = mean - row.truth;
    row.rmse = std::sqrt(sq / b);
    row.sd_theta = std::sqrt(var / b);
    row.coverage = covered / b;
    row.mean_se = se / b;
    rep.rows.push_back(row);
  }
  return rep;
}

DgpSpec reference_design(double sigma_min) {
  DgpSpec s;
  s.p_u = VectorXd(3);
  s.p_u << 0.286, 0.286, 0.438;
  s.gamma_x = MatrixXd(6, 3);
  s.gamma_x << 0.778, 0.028, 0.022,  //
      0.067, 0.050, 0.033,           //
      0.056, 0.422, 0.044,           //
      0.044, 0.422, 0.056,           //
      0.033, 0.050, 0.067,           //
      0.022, 0.028, 0.778;
  s.gamma_y1 = MatrixXd(3, 3);
  s.gamma_y1 << 0.656, 0.022, 0.000,  //
      0.117, 0.706, 0.117,            //
      0.228, 0.272, 0.883;
  s.gamma_y0 = MatrixXd(3, 3);
  s.gamma_y0 << 0.756, 0.122, 0.078,  //
      0.167, 0.756, 0.167,            //
      0.078, 0.122, 0.756;
  s.lambda = MatrixXd(3, 3);
  if (std::abs(sigma_min - 0.701) < 5e-4) {
    s.name = "sigma_min_0.701";
    s.lambda << 0.840, 0.091, 0.040,  //
        0.077, 0.772, 0.056,          //
        0.083, 0.137, 0.905;
  } else if (std::abs(sigma_min - 0.501) < 5e-4) {
    s.name = "sigma_min_0.501";
    s.lambda << 0.722, 0.134, 0.078,  //
        0.124, 0.665, 0.095,          //
        0.154, 0.201, 0.827;
  } else if (std::abs(sigma_min - 0.310) < 5e-4) {
    s.name = "sigma_min_0.310";
    s.lambda << 0.611, 0.175, 0.120,  //
        0.168, 0.563, 0.137,          //
        0.221, 0.262, 0.744;
  } else {
    throw ConfigError("reference designs exist for sigma_min 0.701, 0.501 and 0.310");
  }
  s.x_cuts = {2.0, 4.0};
  s.y_cuts = {1.0, 2.0};
  s.z_cuts = {1.0, 2.0};
  return normalize(s);
}

}  // namespace ldte
