#include "ldte/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace ldte {

Partition::Partition(std::vector<double> cuts) : cuts_(std::move(cuts)) {
  for (std::size_t i = 0; i < cuts_.size(); ++i) {
    if (!std::isfinite(cuts_[i])) throw DegeneratePartition("partition cut is not finite");
    if (i > 0 && !(cuts_[i] > cuts_[i - 1])) {
      throw DegeneratePartition("partition cuts must be strictly increasing (cut " +
                                std::to_string(i) + " repeats or decreases)");
    }
  }
}

int Partition::cell_of(double value) const {
  return static_cast<int>(std::lower_bound(cuts_.begin(), cuts_.end(), value) - cuts_.begin());
}

Partition build_partition(std::span<const double> values, int cell_count) {
  if (values.empty()) throw DegeneratePartition("cannot partition an empty sample");
  if (cell_count < 1) throw DegeneratePartition("cell_count must be positive");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
  if (cell_count > distinct) {
    throw DegeneratePartition("requested " + std::to_string(cell_count) + " cells but the sample has only " +
                              std::to_string(distinct) + " distinct values");
  }
  sorted.assign(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());

  const auto n = static_cast<double>(sorted.size());
  std::vector<double> cuts;
  for (int m = 1; m < cell_count; ++m) {
    // nearest rank: the ceil(q n)-th order statistic
    const double q = static_cast<double>(m) / cell_count;
    auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-12));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    const double cut = sorted[rank - 1];
    if (!cuts.empty() && cut <= cuts.back()) {
      throw DegeneratePartition("quantile cuts " + std::to_string(m - 1) + " and " + std::to_string(m) +
                                " coincide at " + std::to_string(cut) + " (too many ties)");
    }
    cuts.push_back(cut);
  }
  Partition part(std::move(cuts));
  std::vector<int> held(cell_count, 0);
  for (double v : values) ++held[part.cell_of(v)];
  for (int c = 0; c < cell_count; ++c) {
    if (held[c] == 0) throw DegeneratePartition("quantile cell " + std::to_string(c) + " is empty");
  }
  return part;
}

Cell cell_at(const CellShape& shape, int index) {
  Cell c;
  c.z = index % shape.k;
  index /= shape.k;
  c.x = index % shape.m_x;
  index /= shape.m_x;
  c.d = index % 2;
  c.y = index / 2;
  return c;
}

std::vector<int> CellTable::support() const {
  std::vector<int> out;
  for (int i = 0; i < weight.size(); ++i) {
    if (weight[i] > 0.0) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

double parse_real(const std::string& field, std::size_t line_no, const char* name) {
  const std::string t = trim(field);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (t.empty() || used != t.size() || !std::isfinite(v)) {
    throw InputError("line " + std::to_string(line_no) + ": field '" + name + "' is not a finite number: '" + t +
                     "'");
  }
  return v;
}

}  // namespace

std::vector<RawRow> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty input: expected header 'y,d,x,z'");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
  auto header = split_fields(line);
  for (auto& h : header) h = trim(h);
  if (header != std::vector<std::string>{"y", "d", "x", "z"}) {
    throw InputError("unexpected header '" + trim(line) + "': expected 'y,d,x,z'");
  }
  std::vector<RawRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 4) {
      throw InputError("line " + std::to_string(line_no) + ": expected 4 fields, found " + std::to_string(f.size()));
    }
    RawRow r;
    r.y = parse_real(f[0], line_no, "y");
    const double d = parse_real(f[1], line_no, "d");
    if (d != 0.0 && d != 1.0) {
      throw InputError("line " + std::to_string(line_no) + ": treatment d must be 0 or 1, found '" + trim(f[1]) + "'");
    }
    r.d = static_cast<int>(d);
    r.x = parse_real(f[2], line_no, "x");
    r.z = parse_real(f[3], line_no, "z");
    rows.push_back(r);
  }
  if (rows.empty()) throw InputError("input has a header but no data rows");
  return rows;
}

std::vector<RawRow> read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open input file '" + path + "'");
  return read_csv(in);
}

void write_csv(std::ostream& out, std::span<const RawRow> rows) {
  out << "y,d,x,z\n";
  out.precision(17);
  for (const auto& r : rows) out << r.y << ',' << r.d << ',' << r.x << ',' << r.z << '\n';
}

DiscreteDataset discretize(std::span<const RawRow> rows, const Partition& y_partition, const Partition& x_partition,
                           const Partition& z_partition, std::optional<std::vector<double>> y_scores) {
  if (rows.empty()) throw InputError("cannot discretize an empty sample");
  DiscreteDataset ds;
  ds.n = static_cast<int>(rows.size());
  ds.shape = CellShape{y_partition.cell_count(), x_partition.cell_count(), z_partition.cell_count()};
  ds.y_partition = y_partition;
  ds.x_partition = x_partition;
  ds.z_partition = z_partition;
  ds.counts.assign(ds.shape.size(), 0);
  ds.y_cell.reserve(rows.size());
  ds.x_cell.reserve(rows.size());
  ds.z_cell.reserve(rows.size());
  ds.d.reserve(rows.size());

  std::vector<std::vector<double>> by_cell(ds.shape.m_y);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.d != 0 && r.d != 1) throw InputError("row " + std::to_string(i) + ": treatment d must be 0 or 1");
    if (!std::isfinite(r.y) || !std::isfinite(r.x) || !std::isfinite(r.z)) {
      throw InputError("row " + std::to_string(i) + ": non-finite value");
    }
    const int yc = y_partition.cell_of(r.y);
    const int xc = x_partition.cell_of(r.x);
    const int zc = z_partition.cell_of(r.z);
    ds.y_cell.push_back(yc);
    ds.x_cell.push_back(xc);
    ds.z_cell.push_back(zc);
    ds.d.push_back(r.d);
    ++ds.counts[ds.shape.index(yc, r.d, xc, zc)];
    if (!y_scores) by_cell[yc].push_back(r.y);
  }

  if (y_scores) {
    if (static_cast<int>(y_scores->size()) != ds.shape.m_y) {
      throw ConfigError("expected " + std::to_string(ds.shape.m_y) + " outcome scores, got " +
                        std::to_string(y_scores->size()));
    }
    ds.y_scores = std::move(*y_scores);
  } else {
    const auto& cuts = y_partition.cuts();
    ds.y_scores.resize(ds.shape.m_y);
    for (int c = 0; c < ds.shape.m_y; ++c) {
      auto& v = by_cell[c];
      if (!v.empty()) {
        std::sort(v.begin(), v.end());
        const auto h = v.size() / 2;
        ds.y_scores[c] = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
      } else if (c > 0 && c < ds.shape.m_y - 1) {
        ds.y_scores[c] = 0.5 * (cuts[c - 1] + cuts[c]);
      } else if (!cuts.empty()) {
        ds.y_scores[c] = c == 0 ? cuts.front() : cuts.back();
      } else {
        ds.y_scores[c] = 0.0;
      }
    }
  }
  return ds;
}

CellTable DiscreteDataset::table() const {
  CellTable t;
  t.shape = shape;
  t.weight.resize(shape.size());
  for (int i = 0; i < shape.size(); ++i) t.weight[i] = static_cast<double>(counts[i]);
  t.n = static_cast<double>(n);
  t.population = false;
  t.y_scores = y_scores;
  return t;
}

CondProbMatrix::CondProbMatrix(Eigen::MatrixXd values, double tol) : values_(std::move(values)) {
  if (!is_column_stochastic(values_, tol)) {
    throw EstimationError("matrix is not column-stochastic within " + std::to_string(tol));
  }
}

CondProbMatrix build_h(const CellTable& table, int d) {
  const auto& s = table.shape;
  Eigen::MatrixXd h(s.m(), s.k);
  for (int z = 0; z < s.k; ++z) {
    double total = 0.0;
    for (int x = 0; x < s.m_x; ++x) {
      for (int y = 0; y < s.m_y; ++y) {
        const double w = table.weight[s.index(y, d, x, z)];
        h(s.row(y, x), z) = w;
        total += w;
      }
    }
    if (!(total > 0.0)) {
      throw InsufficientSupport("no observations in cell (d=" + std::to_string(d) + ", z=" + std::to_string(z + 1) +
                                "): cannot form the conditional distribution");
    }
    h.col(z) /= total;
  }
  return CondProbMatrix(std::move(h), 1e-12);
}

}  // namespace ldte
