#include "ldte/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <thread>

#include <CLI11.hpp>

#include "ldte/core.hpp"
#include "ldte/dte.hpp"
#include "ldte/falsify.hpp"
#include "ldte/io.hpp"
#include "ldte/nmf.hpp"
#include "ldte/sieve.hpp"
#include "ldte/sim.hpp"

namespace ldte {

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t colon = spec.find(':', start);
    const std::string tok = spec.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("grid '" + spec + "' must have the form a:b:step");
    }
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (parts.size() == 1) return parts;
  if (parts.size() != 3 || !(parts[2] > 0.0) || parts[1] < parts[0]) {
    throw ConfigError("grid '" + spec + "' must have the form a:b:step with a <= b and step > 0");
  }
  const double count = std::floor((parts[1] - parts[0]) / parts[2] + 1e-9);
  if (count > 1e6) throw ConfigError("grid '" + spec + "' has too many points");
  std::vector<double> out;
  for (int i = 0; i <= static_cast<int>(count); ++i) out.push_back(parts[0] + i * parts[2]);
  return out;
}

int default_workers() {
  if (const char* env = std::getenv("LDTE_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(std::min(v, 1024L));
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

namespace {

using Clock = std::chrono::steady_clock;

struct PartitionFlags {
  int m_y = 0;  // 0: K
  int m_x = 0;
  std::vector<double> y_cuts;
  std::vector<double> x_cuts;
  std::vector<double> z_cuts;
};

struct FitFlags {
  int k = 0;
  int restarts = 20;
  std::uint64_t seed = 1;
  int workers = 0;
  bool eigen_restart = false;
};

struct EstimateFlags {
  std::string input;
  std::string output;
  std::string delta_grid;
  bool joint_grid = false;
  bool bounds = false;
  bool clamp = false;
  std::string variance = "hoeffding";
};

struct SimulateFlags {
  std::string dgp;
  std::string output;
  int reps = 200;
  int n = 2000;
  std::string deltas;
  bool population = false;
  bool no_falsify = false;
  std::string variance = "hoeffding";
};

struct FalsifyFlags {
  std::string input;
  std::string output;
  std::string variance = "hoeffding";
};

struct SieveFlags {
  std::string input;
  std::string output;
  std::string delta_grid;
  int degree = 3;
  int p_u = -1;
  std::string monotone = "both";
  int restarts = 4;
  int workers = 0;
};

void add_partition_flags(CLI::App* app, PartitionFlags& p) {
  app->add_option("--m-y", p.m_y, "Y cells (default K)")->check(CLI::PositiveNumber);
  app->add_option("--m-x", p.m_x, "X cells (default K)")->check(CLI::PositiveNumber);
  app->add_option("--y-cuts", p.y_cuts, "explicit Y cut points")->delimiter(',');
  app->add_option("--x-cuts", p.x_cuts, "explicit X cut points")->delimiter(',');
  app->add_option("--z-cuts", p.z_cuts, "explicit Z cut points (K - 1 of them)")->delimiter(',');
}

void add_fit_flags(CLI::App* app, FitFlags& f) {
  app->add_option("--k", f.k, "latent support size K")->required()->check(CLI::PositiveNumber);
  app->add_option("--restarts", f.restarts, "factorization restarts")->check(CLI::PositiveNumber);
  app->add_option("--seed", f.seed, "RNG seed");
  app->add_option("--workers", f.workers, "worker threads (default LDTE_WORKERS or all cores)");
  app->add_flag("--eigen-restart", f.eigen_restart, "start restart 1 from clipped singular vectors");
}

VarianceConvention variance_from(const std::string& s) {
  if (s == "hoeffding") return VarianceConvention::hoeffding;
  if (s == "projection") return VarianceConvention::projection;
  throw ConfigError("--variance must be 'hoeffding' or 'projection'");
}

const char* variance_name(VarianceConvention v) {
  return v == VarianceConvention::hoeffding ? "hoeffding" : "projection";
}

// Cuts at support points whose cumulative share is nearest m / cells, keeping
// every cell non-empty. Used when the quantile rule fails on a tied column.
Partition tie_aware_partition(const std::vector<double>& values, int cells) {
  std::map<double, int> counts;
  for (double v : values) ++counts[v];
  const int support = static_cast<int>(counts.size());
  if (support < cells) return build_partition(values, cells);  // raises the usual error
  std::vector<double> points;
  std::vector<double> share;
  double running = 0.0;
  for (const auto& [v, c] : counts) {
    running += c;
    points.push_back(v);
    share.push_back(running / static_cast<double>(values.size()));
  }
  std::vector<double> cuts;
  int lo = 0;
  for (int m = 1; m < cells; ++m) {
    const int hi = support - 1 - (cells - m);
    const double target = static_cast<double>(m) / cells;
    int best = lo;
    for (int i = lo; i <= hi; ++i) {
      if (std::abs(share[i] - target) < std::abs(share[best] - target)) best = i;
    }
    cuts.push_back(points[best]);
    lo = best + 1;
  }
  return Partition(std::move(cuts));
}

Partition make_partition(const std::vector<double>& cuts, const std::vector<double>& values, int cells) {
  if (!cuts.empty()) return Partition(cuts);
  try {
    return build_partition(values, cells);
  } catch (const DegeneratePartition&) {
    return tie_aware_partition(values, cells);
  }
}

DiscreteDataset load_dataset(const std::string& path, const PartitionFlags& pf, int k) {
  const auto rows = read_csv_file(path);
  std::vector<double> ys;
  std::vector<double> xs;
  std::vector<double> zs;
  for (const auto& r : rows) {
    ys.push_back(r.y);
    xs.push_back(r.x);
    zs.push_back(r.z);
  }
  const Partition py = make_partition(pf.y_cuts, ys, pf.m_y > 0 ? pf.m_y : k);
  const Partition px = make_partition(pf.x_cuts, xs, pf.m_x > 0 ? pf.m_x : k);
  const Partition pz = make_partition(pf.z_cuts, zs, k);
  if (pz.cell_count() != k) throw ConfigError("the Z partition must have exactly K cells");
  return discretize(rows, py, px, pz);
}

NmfConfig nmf_config(const FitFlags& f) {
  NmfConfig c;
  c.k = f.k;
  c.restarts = f.restarts;
  c.seed = f.seed;
  c.workers = f.workers > 0 ? f.workers : default_workers();
  c.eigen_restart = f.eigen_restart;
  return c;
}

Json partition_json(const DiscreteDataset& ds) {
  Json j;
  j["y_cuts"] = ds.y_partition.cuts();
  j["x_cuts"] = ds.x_partition.cuts();
  j["z_cuts"] = ds.z_partition.cuts();
  j["y_scores"] = ds.y_scores;
  return j;
}

Json partition_flags_json(const PartitionFlags& p) {
  return {{"m_y", p.m_y}, {"m_x", p.m_x}, {"y_cuts", p.y_cuts}, {"x_cuts", p.x_cuts}, {"z_cuts", p.z_cuts}};
}

Json fit_flags_json(const FitFlags& f, const NmfConfig& c) {
  return {{"k", f.k}, {"restarts", c.restarts}, {"seed", c.seed}, {"workers", c.workers},
          {"eigen_restart", c.eigen_restart}, {"tol_objective", c.tol_objective}};
}

void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

// Every difference of outcome scores, ascending.
std::vector<double> score_differences(const std::vector<double>& scores) {
  std::set<double> d;
  for (double a : scores)
    for (double b : scores) d.insert(b - a);
  return {d.begin(), d.end()};
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------- commands

int cmd_estimate(const EstimateFlags& ef, const FitFlags& ff, const PartitionFlags& pf, std::ostream& out) {
  const auto t0 = Clock::now();
  const DteOptions opts{variance_from(ef.variance)};
  const auto ds = load_dataset(ef.input, pf, ff.k);
  const CellTable table = ds.table();
  const NmfConfig nmf = nmf_config(ff);
  const MixtureFit f = align(fit(build_h(table, 0), build_h(table, 1), table.shape.m_y, nmf), table.y_scores);
  const NuisanceSet eta = make_nuisance(f, table, opts.cond_cap);

  const std::vector<double> deltas = ef.delta_grid.empty() ? score_differences(table.y_scores) : parse_grid(ef.delta_grid);
  std::vector<Target> targets;
  for (double d : deltas) targets.push_back(Target::marginal_at(d));
  const std::size_t n_marginal = targets.size();
  if (ef.joint_grid) {
    for (double y0 : table.y_scores)
      for (double y1 : table.y_scores) targets.push_back(Target::joint_at(y0, y1));
  }
  const auto est = estimate_grid(table, eta, targets, opts);

  std::vector<BoundsEstimate> bounds;
  if (ef.bounds) {
    const Eigen::VectorXd c1 = arm_cdf(table, 1);
    const Eigen::VectorXd c0 = arm_cdf(table, 0);
    for (double d : deltas) bounds.push_back(makarov_bounds(table.y_scores, c1, c0, d));
  }

  out << "delta,theta,se,ci_lo,ci_hi" << (ef.bounds ? ",lower,upper" : "") << '\n';
  for (std::size_t i = 0; i < n_marginal; ++i) {
    const auto& e = est[i];
    const double theta = ef.clamp ? e.theta_clamped : e.theta;
    const double lo = ef.clamp ? std::clamp(e.ci_lo, 0.0, 1.0) : e.ci_lo;
    const double hi = ef.clamp ? std::clamp(e.ci_hi, 0.0, 1.0) : e.ci_hi;
    out << format_double(e.target.delta) << ',' << format_double(theta) << ',' << format_double(e.se) << ','
        << format_double(lo) << ',' << format_double(hi);
    if (ef.bounds) out << ',' << format_double(bounds[i].lower) << ',' << format_double(bounds[i].upper);
    out << '\n';
  }

  if (!ef.output.empty()) {
    Json doc;
    doc["schema"] = kEstimateSchema;
    Manifest m;
    m.command = "estimate";
    m.config = {{"fit", fit_flags_json(ff, nmf)},
                {"partition", partition_flags_json(pf)},
                {"delta_grid", ef.delta_grid},
                {"joint_grid", ef.joint_grid},
                {"bounds", ef.bounds},
                {"clamp", ef.clamp},
                {"variance", variance_name(opts.variance)}};
    m.inputs.emplace_back(ef.input, file_digest(ef.input));
    m.seed = ff.seed;
    m.seconds = seconds_since(t0);
    doc["manifest"] = to_json(m);
    doc["n"] = ds.n;
    doc["partition"] = partition_json(ds);
    doc["fit"] = to_json(f);
    Json marg = Json::array();
    Json joint = Json::array();
    for (std::size_t i = 0; i < est.size(); ++i) (i < n_marginal ? marg : joint).push_back(to_json(est[i]));
    doc["marginal"] = marg;
    doc["joint"] = joint;
    Json b = Json::array();
    for (const auto& x : bounds) b.push_back(to_json(x));
    doc["bounds"] = b;
    write_json(ef.output, doc);
  }
  return exit_ok;
}

int cmd_simulate(const SimulateFlags& sf, const FitFlags& ff, std::ostream& out, std::ostream& err) {
  const auto t0 = Clock::now();
  const DgpSpec dgp = read_dgp(sf.dgp);
  StudyConfig c;
  c.reps = sf.reps;
  c.n = sf.n;
  c.seed = ff.seed;
  c.nmf = nmf_config(ff);
  c.nmf.k = dgp.k();
  c.workers = c.nmf.workers;
  c.dte.variance = variance_from(sf.variance);
  c.falsify = !sf.no_falsify;
  c.population_mode = sf.population;
  c.deltas = sf.deltas.empty() ? score_differences(cell_factors(dgp).y_scores) : parse_grid(sf.deltas);
  if (c.reps < 1 || c.n < 2) throw ConfigError("--reps must be >= 1 and --n >= 2");

  const StudyReport rep = run_study(dgp, c);
  {
    std::ofstream csv(sf.output, std::ios::binary);
    if (!csv) throw InputError("cannot write '" + sf.output + "'");
    write_study_csv(csv, rep);
  }
  Json meta;
  meta["schema"] = kStudySchema;
  Manifest m;
  m.command = "simulate";
  m.config = {{"reps", c.reps},         {"n", c.n},
              {"deltas", c.deltas},     {"population", c.population_mode},
              {"falsify", c.falsify},   {"variance", variance_name(c.dte.variance)},
              {"restarts", c.nmf.restarts}, {"workers", c.workers}, {"dgp", dgp_to_json(dgp)}};
  m.inputs.emplace_back(sf.dgp, file_digest(sf.dgp));
  m.seed = c.seed;
  m.seconds = seconds_since(t0);
  meta["manifest"] = to_json(m);
  meta["output"] = sf.output;
  meta["report"] = to_json(rep);
  write_json(sf.output + ".meta.json", meta);

  out << "wrote " << sf.output << ": " << rep.succeeded << "/" << rep.reps << " replications succeeded";
  if (c.falsify) out << ", falsification rejection rate " << format_double(rep.rejection_rate);
  out << '\n';
  for (const auto& f : rep.failures) err << "warning: " << f << '\n';
  if (10 * rep.succeeded < 9 * rep.reps) {
    err << "error: fewer than 90% of replications succeeded\n";
    return exit_replications;
  }
  return exit_ok;
}

int cmd_falsify(const FalsifyFlags& xf, const FitFlags& ff, const PartitionFlags& pf, std::ostream& out) {
  const auto t0 = Clock::now();
  const auto ds = load_dataset(xf.input, pf, ff.k);
  FalsifyConfig fc;
  fc.nmf = nmf_config(ff);
  fc.variance = variance_from(xf.variance);
  const FalsificationResult r = falsification_test(ds.table(), fc);
  char line[128];
  std::snprintf(line, sizeof line, "T=%.6g df=%d p=%.6g", r.t_stat, r.df, r.p_value);
  out << line << '\n';
  if (!xf.output.empty()) {
    Json doc = to_json(r);
    Manifest m;
    m.command = "falsify";
    m.config = {{"fit", fit_flags_json(ff, fc.nmf)},
                {"partition", partition_flags_json(pf)},
                {"variance", variance_name(fc.variance)}};
    m.inputs.emplace_back(xf.input, file_digest(xf.input));
    m.seed = ff.seed;
    m.seconds = seconds_since(t0);
    doc["manifest"] = to_json(m);
    doc["n"] = ds.n;
    doc["partition"] = partition_json(ds);
    write_json(xf.output, doc);
  }
  return exit_ok;
}

int cmd_sieve(const SieveFlags& sf, std::uint64_t seed, std::ostream& out) {
  const auto t0 = Clock::now();
  const auto rows = read_csv_file(sf.input);
  SieveSpec spec;
  spec.p_y1 = spec.p_y0 = spec.p_x = spec.p_z = sf.degree;
  spec.p_u = sf.p_u >= 0 ? sf.p_u : sf.degree;
  if (sf.monotone == "both") {
    spec.monotone = MonotoneArms::both;
  } else if (sf.monotone == "untreated") {
    spec.monotone = MonotoneArms::untreated;
  } else if (sf.monotone == "treated") {
    spec.monotone = MonotoneArms::treated;
  } else if (sf.monotone == "none") {
    spec.monotone = MonotoneArms::none;
  } else {
    throw ConfigError("--monotone must be both, untreated, treated or none");
  }
  spec = fit_ranges(spec, rows);
  SieveFitConfig cfg;
  cfg.restarts = sf.restarts;
  cfg.seed = seed;
  cfg.workers = sf.workers > 0 ? sf.workers : default_workers();
  const SieveFit f = fit_sieve(rows, spec, cfg);
  std::vector<double> deltas;
  if (sf.delta_grid.empty()) {
    const double w = spec.y_map.scale();
    for (int i = -4; i <= 4; ++i) deltas.push_back(w * i / 4.0);
  } else {
    deltas = parse_grid(sf.delta_grid);
  }
  out << "delta,F\n";
  Json rows_json = Json::array();
  for (double d : deltas) {
    const double v = sieve_dte(f.theta, rows, spec, Target::marginal_at(d));
    out << format_double(d) << ',' << format_double(v) << '\n';
    rows_json.push_back({{"delta", d}, {"F", v}});
  }
  if (!sf.output.empty()) {
    Json doc;
    doc["schema"] = kSieveSchema;
    Manifest m;
    m.command = "sieve";
    m.config = {{"degree", sf.degree}, {"p_u", spec.p_u}, {"monotone", sf.monotone}, {"restarts", sf.restarts}};
    m.inputs.emplace_back(sf.input, file_digest(sf.input));
    m.seed = seed;
    m.seconds = seconds_since(t0);
    doc["manifest"] = to_json(m);
    doc["theta"] = sieve_to_json(f.theta, spec);
    doc["loglik"] = f.loglik;
    doc["iterations"] = f.iterations;
    doc["converged"] = f.converged;
    doc["constraint_residual"] = f.constraint_residual;
    doc["dte"] = rows_json;
    write_json(sf.output, doc);
  }
  return exit_ok;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distributional treatment effects with proxy variables"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  FitFlags est_fit;
  PartitionFlags est_part;
  EstimateFlags ef;
  auto* est = app.add_subcommand("estimate", "estimate F_{Y(1)-Y(0)} and the joint CDF from a y,d,x,z CSV");
  est->add_option("--input", ef.input, "CSV with header y,d,x,z")->required();
  add_fit_flags(est, est_fit);
  add_partition_flags(est, est_part);
  est->add_option("--delta-grid", ef.delta_grid, "a:b:step (default: every difference of Y scores)");
  est->add_flag("--joint-grid", ef.joint_grid, "also estimate F_{Y(0),Y(1)} at every pair of Y scores");
  est->add_flag("--bounds", ef.bounds, "add Makarov bounds");
  est->add_flag("--clamp", ef.clamp, "print estimates clamped to [0, 1]");
  est->add_option("--variance", ef.variance, "hoeffding (default) or projection");
  est->add_option("--output", ef.output, "JSON result document");

  FitFlags sim_fit;
  sim_fit.k = 0;
  SimulateFlags sf;
  auto* sim = app.add_subcommand("simulate", "Monte Carlo study over a DGP document");
  sim->add_option("--dgp", sf.dgp, "DGP JSON document")->required();
  sim->add_option("--reps", sf.reps, "replications B");
  sim->add_option("--n", sf.n, "sample size per replication");
  sim->add_option("--seed", sim_fit.seed, "RNG seed");
  sim->add_option("--output", sf.output, "study CSV (a .meta.json sidecar is written next to it)")->required();
  sim->add_option("--deltas", sf.deltas, "a:b:step (default: every difference of Y cell scores)");
  sim->add_option("--restarts", sim_fit.restarts, "factorization restarts")->check(CLI::PositiveNumber);
  sim->add_option("--workers", sim_fit.workers, "worker threads");
  sim->add_flag("--population", sf.population, "feed exact cell probabilities instead of samples");
  sim->add_flag("--no-falsify", sf.no_falsify, "skip the falsification test");
  sim->add_option("--variance", sf.variance, "hoeffding (default) or projection");

  FitFlags fal_fit;
  PartitionFlags fal_part;
  FalsifyFlags xf;
  auto* fal = app.add_subcommand("falsify", "test equality of X|U across arms");
  fal->add_option("--input", xf.input, "CSV with header y,d,x,z")->required();
  add_fit_flags(fal, fal_fit);
  add_partition_flags(fal, fal_part);
  fal->add_option("--variance", xf.variance, "hoeffding (default) or projection");
  fal->add_option("--output", xf.output, "JSON result document");

  SieveFlags vf;
  std::uint64_t sieve_seed = 1;
  auto* sv = app.add_subcommand("sieve", "Bernstein sieve MLE with a continuous latent variable");
  sv->add_option("--input", vf.input, "CSV with header y,d,x,z")->required();
  sv->add_option("--degree", vf.degree, "Bernstein degree of every outcome block")->check(CLI::NonNegativeNumber);
  sv->add_option("--p-u", vf.p_u, "Bernstein degree in u (default --degree)");
  sv->add_option("--monotone", vf.monotone, "arms with a monotone conditional mean: both, untreated, treated, none");
  sv->add_option("--restarts", vf.restarts, "starts (the first is the uniform model)")->check(CLI::PositiveNumber);
  sv->add_option("--seed", sieve_seed, "RNG seed");
  sv->add_option("--workers", vf.workers, "likelihood threads (default LDTE_WORKERS or all cores)");
  sv->add_option("--delta-grid", vf.delta_grid, "a:b:step in outcome units");
  sv->add_option("--output", vf.output, "JSON document with the coefficients");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return exit_ok;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << '\n';
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_input;
  }

  try {
    if (est->parsed()) return cmd_estimate(ef, est_fit, est_part, out);
    if (sim->parsed()) return cmd_simulate(sf, sim_fit, out, err);
    if (fal->parsed()) return cmd_falsify(xf, fal_fit, fal_part, out);
    if (sv->parsed()) return cmd_sieve(vf, sieve_seed, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return exit_input;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return exit_input;
  } catch (const DegeneratePartition& e) {
    err << "error: " << e.what() << '\n';
    return exit_input;
  } catch (const Error& e) {
    err << "estimation failed: " << e.what() << '\n';
    return exit_estimation;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return exit_estimation;
  }
  return exit_input;
}

}  // namespace ldte
