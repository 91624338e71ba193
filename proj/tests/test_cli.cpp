#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ldte/cli.hpp"
#include "ldte/io.hpp"
#include "ldte/sim.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / ("ldte_cli_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string tool() {
  const char* p = std::getenv("LDTE_CLI");
  REQUIRE_MESSAGE(p != nullptr, "LDTE_CLI must point at the ldte binary");
  return p;
}

std::string data_file(const std::string& name) {
  const char* p = std::getenv("LDTE_DATA");
  REQUIRE_MESSAGE(p != nullptr, "LDTE_DATA must point at the data directory");
  return (fs::path(p) / name).string();
}

Run run(const std::string& args) {
  const fs::path out = scratch() / "stdout.txt";
  const fs::path err = scratch() / "stderr.txt";
  const std::string cmd = "'" + tool() + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<std::vector<double>> parse_csv(const std::string& text, std::string* header = nullptr) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (header) *header = line;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) r.push_back(std::stod(f));
    rows.push_back(r);
  }
  return rows;
}

std::string write_rows(const std::string& name, const std::vector<ldte::RawRow>& rows) {
  const fs::path p = scratch() / name;
  std::ofstream out(p, std::ios::binary);
  ldte::write_csv(out, rows);
  return p.string();
}

// raw values for a design cell: Y and Z take their cell number, X the top of its pair
ldte::RawRow cell_row(const ldte::Cell& c) { return {c.y + 1.0, c.d, 2.0 * c.x + 2.0, c.z + 1.0}; }

// rows in proportion to the exact cell probabilities
std::vector<ldte::RawRow> population_rows(const ldte::DgpSpec& dgp, double total) {
  const auto pop = ldte::population_table(dgp);
  std::vector<ldte::RawRow> rows;
  for (int i = 0; i < pop.shape.size(); ++i) {
    const auto count = static_cast<int>(std::lround(pop.weight[i] * total));
    for (int r = 0; r < count; ++r) rows.push_back(cell_row(ldte::cell_at(pop.shape, i)));
  }
  return rows;
}

// one latent class: the potential outcomes are independent
ldte::DgpSpec one_class() {
  ldte::DgpSpec s;
  s.p_u = Eigen::VectorXd::Ones(1);
  s.gamma_x = Eigen::MatrixXd(3, 1);
  s.gamma_x << 0.2, 0.5, 0.3;
  s.gamma_y0 = Eigen::MatrixXd(3, 1);
  s.gamma_y0 << 0.5, 0.3, 0.2;
  s.gamma_y1 = Eigen::MatrixXd(3, 1);
  s.gamma_y1 << 0.2, 0.3, 0.5;
  s.lambda = Eigen::MatrixXd::Ones(1, 1);
  s.p_d1 = 0.5;
  return ldte::normalize(s);
}

const std::string kDesignCuts = "--y-cuts 1,2 --x-cuts 2,4 --z-cuts 1,2";

}  // namespace

TEST_CASE("grid parsing and worker defaults") {
  CHECK(ldte::parse_grid("-2:2:1") == std::vector<double>{-2, -1, 0, 1, 2});
  CHECK(ldte::parse_grid("0.5") == std::vector<double>{0.5});
  CHECK(ldte::parse_grid("0:1:0.25").size() == 5);
  CHECK_THROWS_AS(ldte::parse_grid("1:0:1"), ldte::ConfigError);
  CHECK_THROWS_AS(ldte::parse_grid("0:1:0"), ldte::ConfigError);
  CHECK_THROWS_AS(ldte::parse_grid("a:b:c"), ldte::ConfigError);
  ::setenv("LDTE_WORKERS", "3", 1);
  CHECK(ldte::default_workers() == 3);
  ::setenv("LDTE_WORKERS", "zero", 1);
  CHECK(ldte::default_workers() >= 1);
  ::unsetenv("LDTE_WORKERS");
}

TEST_CASE("malformed input exits with 2 and no stack trace") {
  const Run missing = run("estimate --input /nonexistent/file.csv --k 3");
  CHECK(missing.code == 2);
  CHECK(missing.err.find("error:") == 0);

  const fs::path bad = scratch() / "bad.csv";
  std::ofstream(bad) << "y,d,x,z\n1,2,3,4\n";
  CHECK(run("estimate --input '" + bad.string() + "' --k 3").code == 2);
  CHECK(run("estimate --k 3").code == 2);
  CHECK(run("frobnicate").code == 2);

  const fs::path dgp = scratch() / "bad_dgp.json";
  std::ofstream(dgp) << "{\"schema\": \"ldte.dgp/1\", \"p_u\": [1.0]}\n";
  const Run r = run("simulate --dgp '" + dgp.string() + "' --output '" + (scratch() / "x.csv").string() + "'");
  CHECK(r.code == 2);
  CHECK(r.err.find("dgp.schema.json") != std::string::npos);
}

TEST_CASE("an empty cell is an estimation failure naming the cell") {
  const auto rows = ldte::sample_rows(ldte::reference_design(0.701), 600, 3, 0);
  const std::string path = write_rows("empty.csv", rows);
  const Run r = run("estimate --input '" + path + "' --k 3 --y-cuts 1,2 --x-cuts 2,4 --z-cuts 1,1.5 --workers 1");
  CHECK(r.code == 3);
  CHECK(r.err.find("cell") != std::string::npos);
}

TEST_CASE("estimate reproduces the library estimate on the same data") {
  const auto dgp = ldte::reference_design(0.701);
  const auto rows = ldte::sample_rows(dgp, 3000, 7, 0);
  const std::string path = write_rows("design.csv", rows);
  const std::string digest = ldte::file_digest(path);
  const fs::path doc_path = scratch() / "estimate.json";
  const Run r = run("estimate --input '" + path + "' --k 3 --delta-grid -2:2:1 --restarts 8 --seed 5 --workers 2 " +
                    kDesignCuts + " --output '" + doc_path.string() + "'");
  REQUIRE(r.code == 0);
  std::string header;
  const auto table_rows = parse_csv(r.out, &header);
  CHECK(header == "delta,theta,se,ci_lo,ci_hi");
  REQUIRE(table_rows.size() == 5);

  const ldte::Partition py({1.0, 2.0}), px({2.0, 4.0}), pz({1.0, 2.0});
  const auto table = ldte::discretize(rows, py, px, pz).table();
  ldte::NmfConfig cfg;
  cfg.k = 3;
  cfg.restarts = 8;
  cfg.seed = 5;
  const auto f = ldte::align(ldte::fit(ldte::build_h(table, 0), ldte::build_h(table, 1), table.shape.m_y, cfg),
                             table.y_scores);
  const auto eta = ldte::make_nuisance(f, table);
  std::vector<ldte::Target> targets;
  for (int d = -2; d <= 2; ++d) targets.push_back(ldte::Target::marginal_at(d));
  const auto lib = ldte::estimate_grid(table, eta, targets);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(table_rows[i][0] == lib[i].target.delta);
    CHECK(table_rows[i][1] == lib[i].theta);
    CHECK(table_rows[i][2] == lib[i].se);
    CHECK(table_rows[i][3] == lib[i].ci_lo);
    CHECK(table_rows[i][4] == lib[i].ci_hi);
  }

  // the result document parses back to the same estimates
  const auto doc = ldte::Json::parse(slurp(doc_path));
  CHECK(doc["schema"] == ldte::kEstimateSchema);
  CHECK(doc["manifest"]["inputs"][0]["fnv1a64"] == digest);
  REQUIRE(doc["marginal"].size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto e = ldte::estimate_from_json(doc["marginal"][i]);
    CHECK(e.theta == lib[i].theta);
    CHECK(e.theta_clamped == lib[i].theta_clamped);
    CHECK(e.se == lib[i].se);
    CHECK(e.ci_lo == lib[i].ci_lo);
    CHECK(e.ci_hi == lib[i].ci_hi);
    CHECK(e.target.delta == lib[i].target.delta);
  }
  CHECK(ldte::file_digest(path) == digest);

  // same flags, same bytes
  CHECK(run("estimate --input '" + path + "' --k 3 --delta-grid -2:2:1 --restarts 8 --seed 5 --workers 1 " +
            kDesignCuts).out == r.out);
}

TEST_CASE("default quantile cells on a tied design sample") {
  const auto rows = ldte::sample_rows(ldte::reference_design(0.501), 3000, 2, 0);
  const std::string path = write_rows("tied.csv", rows);
  const Run r = run("estimate --input '" + path + "' --k 3 --delta-grid -2:2:1 --restarts 4 --workers 2");
  REQUIRE(r.code == 0);
  const auto t = parse_csv(r.out);
  REQUIRE(t.size() == 5);
  for (const auto& row : t) {
    CHECK(std::isfinite(row[1]));
    CHECK(row[2] > 0.0);
  }
}

TEST_CASE("one latent class gives the independence coupling") {
  const auto rows = ldte::sample_rows(one_class(), 3000, 11, 0);
  const std::string path = write_rows("k1.csv", rows);
  const Run r = run("estimate --input '" + path + "' --k 1 --m-y 3 --m-x 3 --y-cuts 1,2 --x-cuts 1,2 --delta-grid -2:2:1 --workers 1");
  REQUIRE(r.code == 0);
  const auto t = parse_csv(r.out);
  REQUIRE(t.size() == 5);

  double p1[3] = {0, 0, 0}, p0[3] = {0, 0, 0};
  double n1 = 0, n0 = 0;
  for (const auto& row : rows) {
    const int c = static_cast<int>(row.y) - 1;
    if (row.d == 1) {
      p1[c] += 1;
      n1 += 1;
    } else {
      p0[c] += 1;
      n0 += 1;
    }
  }
  const double n = static_cast<double>(rows.size());
  for (int i = 0; i < 5; ++i) {
    const double delta = i - 2.0;
    double coupling = 0.0;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        if (a - b <= delta) coupling += p1[a] / n1 * p0[b] / n0;
    CAPTURE(delta);
    // the score's sample mean differs from zero by O(1/n)
    CHECK(std::abs(t[static_cast<std::size_t>(i)][1] - coupling) < 10.0 / n);
  }
}

TEST_CASE("bounds bracket the clamped estimate on population-mode data") {
  const auto dgp = ldte::reference_design(0.501);
  const auto rows = population_rows(dgp, 200000.0);
  const std::string path = write_rows("population.csv", rows);
  const Run r = run("estimate --input '" + path + "' --k 3 --bounds --clamp --delta-grid -2:2:0.5 --restarts 8 --workers 2 " +
                    kDesignCuts);
  REQUIRE(r.code == 0);
  std::string header;
  const auto t = parse_csv(r.out, &header);
  CHECK(header == "delta,theta,se,ci_lo,ci_hi,lower,upper");
  REQUIRE(t.size() == 9);

  // Makarov bounds from the empirical arm margins on the score grid
  double c1[3] = {0, 0, 0}, c0[3] = {0, 0, 0};
  double n1 = 0, n0 = 0;
  for (const auto& row : rows) {
    (row.d == 1 ? c1 : c0)[static_cast<int>(row.y) - 1] += 1;
    (row.d == 1 ? n1 : n0) += 1;
  }
  auto cdf = [](const double* mass, double total, double y) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
      if (i + 1.0 <= y + 1e-12) s += mass[i];
    return s / total;
  };
  for (const auto& row : t) {
    const double delta = row[0];
    double lo = 0.0, hi = 1.0;
    for (double y = 0.0; y <= 4.0; y += 0.5) {
      const double gap = cdf(c1, n1, y) - cdf(c0, n0, y - delta);
      lo = std::max(lo, gap);
      hi = std::min(hi, 1.0 + gap);
    }
    CAPTURE(delta);
    CHECK(row[5] == doctest::Approx(lo).epsilon(1e-12));
    CHECK(row[6] == doctest::Approx(hi).epsilon(1e-12));
    CHECK(row[1] >= row[5] - 1e-3);
    CHECK(row[1] <= row[6] + 1e-3);
    CHECK(std::abs(row[1] - std::clamp(ldte::true_dte(dgp, delta), 0.0, 1.0)) < 1e-3);
  }
}

TEST_CASE("simulate writes a deterministic study table") {
  const std::string dgp = data_file("dgp_701.json");
  const fs::path a = scratch() / "study_a.csv";
  const fs::path b = scratch() / "study_b.csv";
  const std::string flags = " --reps 3 --n 500 --seed 9 --restarts 4 --dgp '" + dgp + "'";
  const Run ra = run("simulate" + flags + " --workers 1 --output '" + a.string() + "'");
  const Run rb = run("simulate" + flags + " --workers 3 --output '" + b.string() + "'");
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  CHECK(slurp(a) == slurp(b));
  std::string header;
  const auto t = parse_csv(slurp(a), &header);
  CHECK(header == "delta,bias,rmse,coverage");
  CHECK(t.size() == 5);
  const auto meta = ldte::Json::parse(slurp(a.string() + ".meta.json"));
  CHECK(meta["schema"] == ldte::kStudySchema);
  CHECK(meta["manifest"]["seed"] == 9);

  const fs::path one = scratch() / "study_one.csv";
  REQUIRE(run("simulate --reps 1 --n 800 --seed 2 --restarts 4 --no-falsify --dgp '" + dgp + "' --output '" +
              one.string() + "'").code == 0);
  for (const auto& row : parse_csv(slurp(one))) CHECK((row[3] == 0.0 || row[3] == 1.0));
}

TEST_CASE("falsify prints one line in the documented format") {
  const auto rows = ldte::sample_rows(ldte::reference_design(0.701), 3000, 4, 0);
  const std::string path = write_rows("falsify.csv", rows);
  const fs::path doc = scratch() / "falsify.json";
  const Run r = run("falsify --input '" + path + "' --k 3 --restarts 6 --workers 2 " + kDesignCuts + " --output '" +
                    doc.string() + "'");
  REQUIRE(r.code == 0);
  double t = -1, p = -1;
  int df = -1;
  char trailing = 0;
  CHECK(std::sscanf(r.out.c_str(), "T=%lf df=%d p=%lf%c", &t, &df, &p, &trailing) == 4);
  CHECK(trailing == '\n');
  CHECK(t >= 0.0);
  CHECK(df == 9);
  CHECK(p >= 0.0);
  CHECK(p <= 1.0);
  const auto j = ldte::Json::parse(slurp(doc));
  CHECK(j["schema"] == ldte::kFalsifySchema);
  CHECK(j["df"] == df);
}

TEST_CASE("sieve prints a CDF of the effect") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ldte::RawRow> rows;
  for (int i = 0; i < 400; ++i) {
    const double latent = u(rng);
    const int d = i % 2;
    rows.push_back({latent + 0.5 * u(rng) + 0.3 * d, d, latent + 0.5 * u(rng), latent + 0.5 * u(rng)});
  }
  const std::string path = write_rows("continuous.csv", rows);
  const fs::path doc = scratch() / "sieve.json";
  const Run r = run("sieve --input '" + path + "' --degree 2 --restarts 1 --workers 2 --output '" + doc.string() + "'");
  REQUIRE(r.code == 0);
  std::string header;
  const auto t = parse_csv(r.out, &header);
  CHECK(header == "delta,F");
  REQUIRE(t.size() == 9);
  CHECK(t.front()[1] == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(t.back()[1] == doctest::Approx(1.0).epsilon(1e-10));
  for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i][1] >= t[i - 1][1] - 1e-12);
  const auto j = ldte::Json::parse(slurp(doc));
  CHECK(j["schema"] == ldte::kSieveSchema);
  CHECK(j["constraint_residual"].get<double>() <= 1e-8);
}

TEST_CASE("in-process entry point") {
  std::ostringstream out, err;
  const char* argv[] = {"ldte", "--version"};
  CHECK(ldte::run_cli(2, argv, out, err) == 0);
  CHECK(out.str() == std::string(ldte::kToolVersion) + "\n");
}
