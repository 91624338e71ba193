#ifndef LDTE_CORE_HPP
#define LDTE_CORE_HPP

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ldte/error.hpp"

namespace ldte {

/// Half-open cells (c_{m-1}, c_m] over the real line, with -inf and +inf
/// implied at the ends. Cell indices are 0-based throughout the library.
class Partition {
 public:
  Partition() = default;
  /// Throws DegeneratePartition unless `cuts` is strictly increasing.
  explicit Partition(std::vector<double> cuts);

  const std::vector<double>& cuts() const { return cuts_; }
  int cell_count() const { return static_cast<int>(cuts_.size()) + 1; }

  /// A value equal to a cut belongs to the lower cell.
  int cell_of(double value) const;

 private:
  std::vector<double> cuts_;
};

/// Equal-probability cells from nearest-rank empirical quantiles at levels
/// m / cell_count. Duplicate cuts or empty cells raise DegeneratePartition.
Partition build_partition(std::span<const double> values, int cell_count);

/// Dimensions of the (y, d, x, z) cell grid. d is always binary and the
/// z-partition always has exactly k cells.
struct CellShape {
  int m_y = 0;
  int m_x = 0;
  int k = 0;

  int m() const { return m_y * m_x; }
  int size() const { return m_y * 2 * m_x * k; }
  int index(int y, int d, int x, int z) const { return ((y * 2 + d) * m_x + x) * k + z; }
  /// Row of H_d for the (y, x) pair; x-major so rows run y fastest.
  int row(int y, int x) const { return x * m_y + y; }
  bool operator==(const CellShape&) const = default;
};

struct Cell {
  int y = 0;
  int d = 0;
  int x = 0;
  int z = 0;
};

Cell cell_at(const CellShape& shape, int index);

/// Cell-aggregated view of a sample (integer counts, `population == false`)
/// or of a data-generating process (cell probabilities, `population == true`).
/// Every estimator downstream of discretization consumes this type.
struct CellTable {
  CellShape shape;
  Eigen::VectorXd weight;  // indexed by CellShape::index
  double n = 0.0;          // sample size; for population tables a nominal size for standard errors (0: none)
  bool population = false;
  std::vector<double> y_scores;  // outcome value attached to each Y cell

  double prob(int index) const { return population ? weight[index] : weight[index] / n; }
  /// Cells with non-zero weight, in index order.
  std::vector<int> support() const;
};

struct RawRow {
  double y = 0.0;
  int d = 0;
  double x = 0.0;
  double z = 0.0;
};

/// Reads the `y,d,x,z` CSV format. Throws InputError on a wrong header,
/// non-numeric fields, a d outside {0, 1}, or an empty body.
std::vector<RawRow> read_csv(std::istream& in);
std::vector<RawRow> read_csv_file(const std::string& path);
void write_csv(std::ostream& out, std::span<const RawRow> rows);

struct DiscreteDataset {
  int n = 0;
  std::vector<int> y_cell;
  std::vector<int> x_cell;
  std::vector<int> z_cell;
  std::vector<int> d;
  CellShape shape;
  std::vector<std::int64_t> counts;  // N[y, d, x, z], indexed by CellShape::index
  std::vector<double> y_scores;
  Partition y_partition;
  Partition x_partition;
  Partition z_partition;

  std::int64_t count(int y, int d_, int x, int z) const { return counts[shape.index(y, d_, x, z)]; }
  CellTable table() const;
};

/// Assigns cells by half-open membership and tallies the count tensor.
/// `y_scores`, when given, labels each Y cell; otherwise each cell is labelled
/// with the median of the raw outcomes it holds (the cut midpoint for an empty
/// interior cell).
DiscreteDataset discretize(std::span<const RawRow> rows, const Partition& y_partition,
                           const Partition& x_partition, const Partition& z_partition,
                           std::optional<std::vector<double>> y_scores = std::nullopt);

/// Column-stochastic matrix of conditional cell probabilities.
class CondProbMatrix {
 public:
  CondProbMatrix() = default;
  /// Validates entries in [0, 1] and unit column sums within `tol`.
  explicit CondProbMatrix(Eigen::MatrixXd values, double tol = 1e-8);

  const Eigen::MatrixXd& values() const { return values_; }
  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index cols() const { return values_.cols(); }
  double operator()(Eigen::Index r, Eigen::Index c) const { return values_(r, c); }

 private:
  Eigen::MatrixXd values_;
};

template <typename Derived>
bool is_column_stochastic(const Eigen::MatrixBase<Derived>& m, double tol) {
  if (m.size() == 0) return false;
  if ((m.array() < -tol).any() || (m.array() > 1.0 + tol).any()) return false;
  return ((m.colwise().sum().array() - 1.0).abs() <= tol).all();
}

/// Conditional distribution of (Y, X) given (D = d, Z = z): entry ((y, x), z)
/// is N[y, d, x, z] / sum over (y', x') of N[y', d, x', z].
/// Throws InsufficientSupport naming the first empty (d, z) cell.
CondProbMatrix build_h(const CellTable& table, int d);

}  // namespace ldte

#endif  // LDTE_CORE_HPP
