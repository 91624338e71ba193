#ifndef LDTE_IO_HPP
#define LDTE_IO_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ldte/dte.hpp"
#include "ldte/falsify.hpp"
#include "ldte/nmf.hpp"
#include "ldte/sieve.hpp"
#include "ldte/sim.hpp"

namespace ldte {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kDgpSchema = "ldte.dgp/1";
inline constexpr const char* kSieveSchema = "ldte.sieve/1";
inline constexpr const char* kEstimateSchema = "ldte.estimate/1";
inline constexpr const char* kFalsifySchema = "ldte.falsify/1";
inline constexpr const char* kStudySchema = "ldte.study/1";

/// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_digest(const std::string& path);
std::string read_text_file(const std::string& path);

// Matrices are written as arrays of rows.
Json to_json(const Eigen::MatrixXd& m);
Json to_json(const Eigen::VectorXd& v);
Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& field);
Eigen::VectorXd vector_from_json(const Json& j, const std::string& field);

/// DGP documents (schema in docs/dgp.schema.json). Throws InputError naming
/// the offending field; the result is normalized.
DgpSpec dgp_from_json(const Json& j);
Json dgp_to_json(const DgpSpec& dgp);
DgpSpec read_dgp(const std::string& path);

Json sieve_to_json(const SieveTheta& theta, const SieveSpec& spec);
std::pair<SieveTheta, SieveSpec> sieve_from_json(const Json& j);

Json to_json(const Target& t);
Target target_from_json(const Json& j);
Json to_json(const DteEstimate& e);
DteEstimate estimate_from_json(const Json& j);
Json to_json(const BoundsEstimate& b);
Json to_json(const MixtureFit& fit);
Json to_json(const FalsificationResult& r);
Json to_json(const StudyReport& r);

/// `delta,bias,rmse,coverage`, one row per grid point, shortest round-trip decimals.
void write_study_csv(std::ostream& out, const StudyReport& report);
/// Shortest decimal that parses back to the same double.
std::string format_double(double v);

struct Manifest {
  std::string command;
  Json config = Json::object();
  std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
  std::uint64_t seed = 0;
  double seconds = 0.0;
};
Json to_json(const Manifest& m);

}  // namespace ldte

#endif  // LDTE_IO_HPP
