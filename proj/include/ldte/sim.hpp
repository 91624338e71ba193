#ifndef LDTE_SIM_HPP
#define LDTE_SIM_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ldte/core.hpp"
#include "ldte/dte.hpp"
#include "ldte/falsify.hpp"
#include "ldte/nmf.hpp"

namespace ldte {

/// Finite-support mixture design. Raw X, Y and Z take the values in
/// x_values etc. (default 1, 2, ...); the cut lists collapse raw values into
/// estimation cells (default: one cell per value).
struct DgpSpec {
  std::string name;
  Eigen::VectorXd p_u;
  Eigen::MatrixXd gamma_x;   // raw X values x K
  Eigen::MatrixXd gamma_y0;  // raw Y values x K
  Eigen::MatrixXd gamma_y1;
  Eigen::MatrixXd lambda;  // K x K, P(U = u_k | Z = z_j), shared by both arms
  double p_d1 = 0.5;
  std::optional<Eigen::VectorXd> p_z;  // empty: solve lambda p_z = p_u
  std::vector<double> x_values;
  std::vector<double> y_values;
  std::vector<double> z_values;
  std::vector<double> x_cuts;
  std::vector<double> y_cuts;
  std::vector<double> z_cuts;

  int k() const { return static_cast<int>(p_u.size()); }
};

/// Renormalizes every column, fills default supports and partitions, solves
/// for p_z when absent and recomputes p_u = lambda p_z so the design is
/// internally consistent. Throws InputError on a negative solved p_z.
DgpSpec normalize(DgpSpec spec);

/// Factors after collapsing raw values into estimation cells.
struct CellFactors {
  Eigen::MatrixXd gamma_x;
  Eigen::MatrixXd gamma_y0;
  Eigen::MatrixXd gamma_y1;
  Eigen::MatrixXd lambda;
  Eigen::VectorXd p_u;
  Eigen::VectorXd p_z;
  std::vector<double> y_scores;  // cell indices 1..M_Y
};
CellFactors cell_factors(const DgpSpec& dgp);

/// Exact cell probabilities; `nominal_n` is carried for standard errors.
CellTable population_table(const DgpSpec& dgp, double nominal_n = 0.0);

/// The true nuisances of a normalized design.
NuisanceSet true_nuisance(const DgpSpec& dgp);

/// sum_k p_u(k) sum over (y1, y0) with s(y1) - s(y0) <= delta of Gamma_Y1 Gamma_Y0, on cell scores.
double true_dte(const DgpSpec& dgp, double delta);
double true_joint(const DgpSpec& dgp, double y0, double y1);

/// Draws (Z, D, U, X, Y(0), Y(1)) and keeps Y(D). Deterministic in (seed, stream).
std::vector<RawRow> sample_rows(const DgpSpec& dgp, int n, std::uint64_t seed, std::uint64_t stream = 0);
DiscreteDataset sample(const DgpSpec& dgp, int n, std::uint64_t seed, std::uint64_t stream = 0);

struct StudyConfig {
  int reps = 200;
  int n = 2000;
  std::vector<double> deltas{-2.0, -1.0, 0.0, 1.0, 2.0};
  std::uint64_t seed = 1;
  NmfConfig nmf;
  DteOptions dte;
  bool falsify = true;
  bool population_mode = false;  // exact H, no sampling
  int workers = 1;
};

struct StudyRow {
  double delta = 0.0;
  double truth = 0.0;
  double bias = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;
  double mean_se = 0.0;
  double sd_theta = 0.0;
};

struct StudyReport {
  std::vector<StudyRow> rows;
  double rejection_rate = 0.0;
  int falsify_count = 0;
  int reps = 0;
  int succeeded = 0;
  int failed = 0;
  std::vector<std::string> failures;  // "replication r: message"
  int n = 0;
  std::uint64_t seed = 0;
};

StudyReport run_study(const DgpSpec& dgp, const StudyConfig& config);

/// The three designs used in the simulation study, indexed by the smallest
/// singular value of lambda: 0.701, 0.501, 0.310.
DgpSpec reference_design(double sigma_min);

}  // namespace ldte

#endif  // LDTE_SIM_HPP
