#include "ldte/io.hpp"

#include <charconv>
#include <fstream>
#include <ostream>
#include <sstream>

namespace ldte {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xf];
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_digest(const std::string& path) { return fnv1a_hex(read_text_file(path)); }

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// ---------------------------------------------------------------- arrays

Json to_json(const MatrixXd& m) {
  Json rows = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Json to_json(const VectorXd& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

namespace {

const char* kSchemaHint = " (see docs/dgp.schema.json)";

const Json& field(const Json& j, const std::string& name) {
  if (!j.is_object() || !j.contains(name)) throw InputError("missing field '" + name + "'");
  return j.at(name);
}

double number(const Json& j, const std::string& name) {
  if (!j.is_number()) throw InputError("field '" + name + "' must be a number");
  return j.get<double>();
}

std::vector<double> number_list(const Json& j, const std::string& name) {
  if (!j.is_array()) throw InputError("field '" + name + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) out.push_back(number(v, name));
  return out;
}

}  // namespace

MatrixXd matrix_from_json(const Json& j, const std::string& name) {
  if (!j.is_array() || j.empty()) throw InputError("field '" + name + "' must be a non-empty array of rows");
  const auto rows = static_cast<Index>(j.size());
  if (!j[0].is_array() || j[0].empty()) throw InputError("field '" + name + "' must be a non-empty array of rows");
  const auto cols = static_cast<Index>(j[0].size());
  MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const auto row = number_list(j[static_cast<std::size_t>(r)], name);
    if (static_cast<Index>(row.size()) != cols) throw InputError("field '" + name + "' has ragged rows");
    for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

VectorXd vector_from_json(const Json& j, const std::string& name) {
  const auto v = number_list(j, name);
  if (v.empty()) throw InputError("field '" + name + "' is empty");
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

// ------------------------------------------------------------------- DGP

DgpSpec dgp_from_json(const Json& j) {
  try {
    if (!j.is_object()) throw InputError("a DGP document must be a JSON object");
    if (j.contains("schema") && j.at("schema") != kDgpSchema) {
      throw InputError(std::string("unsupported schema, expected '") + kDgpSchema + "'");
    }
    DgpSpec s;
    if (j.contains("name")) s.name = j.at("name").get<std::string>();
    s.p_u = vector_from_json(field(j, "p_u"), "p_u");
    s.gamma_x = matrix_from_json(field(j, "gamma_x"), "gamma_x");
    s.gamma_y0 = matrix_from_json(field(j, "gamma_y0"), "gamma_y0");
    s.gamma_y1 = matrix_from_json(field(j, "gamma_y1"), "gamma_y1");
    s.lambda = matrix_from_json(field(j, "lambda"), "lambda");
    if (j.contains("p_d1")) s.p_d1 = number(j.at("p_d1"), "p_d1");
    if (j.contains("p_z") && !j.at("p_z").is_null()) s.p_z = vector_from_json(j.at("p_z"), "p_z");
    auto list = [&](const char* name, std::vector<double>& dst) {
      if (j.contains(name)) dst = number_list(j.at(name), name);
    };
    list("x_values", s.x_values);
    list("y_values", s.y_values);
    list("z_values", s.z_values);
    list("x_cuts", s.x_cuts);
    list("y_cuts", s.y_cuts);
    list("z_cuts", s.z_cuts);
    return normalize(s);
  } catch (const InputError& e) {
    throw InputError(std::string("bad DGP document: ") + e.what() + kSchemaHint);
  } catch (const DegeneratePartition& e) {
    throw InputError(std::string("bad DGP document: ") + e.what() + kSchemaHint);
  } catch (const Json::exception& e) {
    throw InputError(std::string("bad DGP document: ") + e.what() + kSchemaHint);
  }
}

Json dgp_to_json(const DgpSpec& d) {
  Json j;
  j["schema"] = kDgpSchema;
  j["name"] = d.name;
  j["p_u"] = to_json(d.p_u);
  j["gamma_x"] = to_json(d.gamma_x);
  j["gamma_y0"] = to_json(d.gamma_y0);
  j["gamma_y1"] = to_json(d.gamma_y1);
  j["lambda"] = to_json(d.lambda);
  j["p_d1"] = d.p_d1;
  if (d.p_z) j["p_z"] = to_json(*d.p_z);
  j["x_values"] = d.x_values;
  j["y_values"] = d.y_values;
  j["z_values"] = d.z_values;
  j["x_cuts"] = d.x_cuts;
  j["y_cuts"] = d.y_cuts;
  j["z_cuts"] = d.z_cuts;
  return j;
}

DgpSpec read_dgp(const std::string& path) {
  const std::string text = read_text_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw InputError("'" + path + "' is not valid JSON: " + e.what() + kSchemaHint);
  }
  return dgp_from_json(j);
}

// ----------------------------------------------------------------- sieve

namespace {

const char* monotone_name(MonotoneArms m) {
  switch (m) {
    case MonotoneArms::both: return "both";
    case MonotoneArms::untreated: return "untreated";
    case MonotoneArms::treated: return "treated";
    case MonotoneArms::none: return "none";
  }
  return "both";
}

MonotoneArms monotone_from(const std::string& s) {
  if (s == "both") return MonotoneArms::both;
  if (s == "untreated") return MonotoneArms::untreated;
  if (s == "treated") return MonotoneArms::treated;
  if (s == "none") return MonotoneArms::none;
  throw InputError("unknown monotone setting '" + s + "'");
}

}  // namespace

Json sieve_to_json(const SieveTheta& theta, const SieveSpec& spec) {
  Json j;
  j["schema"] = kSieveSchema;
  j["degrees"] = {{"p_y1", spec.p_y1}, {"p_y0", spec.p_y0}, {"p_x", spec.p_x}, {"p_u", spec.p_u}, {"p_z", spec.p_z}};
  j["nodes"] = spec.node_count();
  j["maps"] = {{"y", {spec.y_map.lo, spec.y_map.hi}},
               {"x", {spec.x_map.lo, spec.x_map.hi}},
               {"z", {spec.z_map.lo, spec.z_map.hi}}};
  j["monotone"] = monotone_name(spec.monotone);
  Json blocks;
  for (int b = 0; b < 5; ++b) blocks[block_name(b)] = to_json(theta[b]);
  j["blocks"] = blocks;
  return j;
}

std::pair<SieveTheta, SieveSpec> sieve_from_json(const Json& j) {
  try {
    if (j.contains("schema") && j.at("schema") != kSieveSchema) {
      throw InputError(std::string("unsupported schema, expected '") + kSieveSchema + "'");
    }
    SieveSpec spec;
    const Json& deg = field(j, "degrees");
    spec.p_y1 = field(deg, "p_y1").get<int>();
    spec.p_y0 = field(deg, "p_y0").get<int>();
    spec.p_x = field(deg, "p_x").get<int>();
    spec.p_u = field(deg, "p_u").get<int>();
    spec.p_z = field(deg, "p_z").get<int>();
    if (j.contains("nodes")) spec.nodes = j.at("nodes").get<int>();
    const Json& maps = field(j, "maps");
    auto map = [&](const char* name) {
      const auto v = number_list(field(maps, name), name);
      if (v.size() != 2) throw InputError(std::string("map '") + name + "' needs [lo, hi]");
      return UnitMap{v[0], v[1]};
    };
    spec.y_map = map("y");
    spec.x_map = map("x");
    spec.z_map = map("z");
    if (j.contains("monotone")) spec.monotone = monotone_from(j.at("monotone").get<std::string>());
    SieveTheta theta = SieveTheta::uniform(spec);
    const Json& blocks = field(j, "blocks");
    for (int b = 0; b < 5; ++b) {
      MatrixXd m = matrix_from_json(field(blocks, block_name(b)), block_name(b));
      if (m.rows() != theta[b].rows() || m.cols() != theta[b].cols()) {
        throw InputError(std::string("block '") + block_name(b) + "' does not match the degrees");
      }
      theta[b] = std::move(m);
    }
    return {std::move(theta), spec};
  } catch (const Json::exception& e) {
    throw InputError(std::string("bad sieve document: ") + e.what());
  }
}

// --------------------------------------------------------------- results

Json to_json(const Target& t) {
  if (t.kind == Target::Kind::marginal) return {{"kind", "marginal"}, {"delta", t.delta}};
  return {{"kind", "joint"}, {"y0", t.y0}, {"y1", t.y1}};
}

Target target_from_json(const Json& j) {
  const std::string kind = field(j, "kind").get<std::string>();
  if (kind == "marginal") return Target::marginal_at(field(j, "delta").get<double>());
  if (kind == "joint") return Target::joint_at(field(j, "y0").get<double>(), field(j, "y1").get<double>());
  throw InputError("unknown target kind '" + kind + "'");
}

Json to_json(const DteEstimate& e) {
  Json j;
  j["target"] = to_json(e.target);
  j["theta"] = e.theta;
  j["theta_clamped"] = e.theta_clamped;
  j["se"] = e.se;
  j["ci_lo"] = e.ci_lo;
  j["ci_hi"] = e.ci_hi;
  j["sigma2"] = e.sigma2;
  j["degraded"] = e.degraded;
  return j;
}

DteEstimate estimate_from_json(const Json& j) {
  DteEstimate e;
  e.target = target_from_json(field(j, "target"));
  e.theta = field(j, "theta").get<double>();
  e.theta_clamped = field(j, "theta_clamped").get<double>();
  e.se = field(j, "se").get<double>();
  e.ci_lo = field(j, "ci_lo").get<double>();
  e.ci_hi = field(j, "ci_hi").get<double>();
  e.sigma2 = field(j, "sigma2").get<double>();
  e.degraded = field(j, "degraded").get<bool>();
  return e;
}

Json to_json(const BoundsEstimate& b) { return {{"delta", b.delta}, {"lower", b.lower}, {"upper", b.upper}}; }

Json to_json(const MixtureFit& f) {
  Json j;
  j["gamma_x"] = to_json(f.gamma_x.values());
  j["gamma_y0"] = to_json(f.gamma_y0.values());
  j["gamma_y1"] = to_json(f.gamma_y1.values());
  j["lambda0"] = to_json(f.lambda0.values());
  j["lambda1"] = to_json(f.lambda1.values());
  j["objective"] = f.objective;
  j["restarts_used"] = f.restarts_used;
  j["best_restart"] = f.best_restart;
  j["outer_iterations"] = f.outer_iterations;
  j["converged"] = f.converged;
  return j;
}

Json to_json(const FalsificationResult& r) {
  Json j;
  j["schema"] = kFalsifySchema;
  j["t_stat"] = r.t_stat;
  j["df"] = r.df;
  j["full_df"] = r.full_df;
  j["p_value"] = r.p_value;
  j["permutation"] = r.permutation;
  j["degraded"] = r.degraded;
  j["w"] = to_json(r.w);
  j["avar"] = to_json(r.avar);
  return j;
}

Json to_json(const StudyReport& r) {
  Json j;
  j["schema"] = kStudySchema;
  j["reps"] = r.reps;
  j["n"] = r.n;
  j["seed"] = r.seed;
  j["succeeded"] = r.succeeded;
  j["failed"] = r.failed;
  j["rejection_rate"] = r.rejection_rate;
  j["falsify_count"] = r.falsify_count;
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"delta", row.delta},
                    {"truth", row.truth},
                    {"bias", row.bias},
                    {"rmse", row.rmse},
                    {"coverage", row.coverage},
                    {"mean_se", row.mean_se},
                    {"sd_theta", row.sd_theta}});
  }
  j["rows"] = rows;
  j["failures"] = r.failures;
  return j;
}

void write_study_csv(std::ostream& out, const StudyReport& report) {
  out << "delta,bias,rmse,coverage\n";
  for (const auto& r : report.rows) {
    out << format_double(r.delta) << ',' << format_double(r.bias) << ',' << format_double(r.rmse) << ','
        << format_double(r.coverage) << '\n';
  }
}

Json to_json(const Manifest& m) {
  Json j;
  j["command"] = m.command;
  j["tool_version"] = kToolVersion;
  j["config"] = m.config;
  Json inputs = Json::array();
  for (const auto& [path, digest] : m.inputs) inputs.push_back({{"path", path}, {"fnv1a64", digest}});
  j["inputs"] = inputs;
  j["seed"] = m.seed;
  j["wall_seconds"] = m.seconds;
  return j;
}

}  // namespace ldte
