#ifndef LDTE_CLI_HPP
#define LDTE_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace ldte {

enum ExitCode : int {
  exit_ok = 0,
  exit_input = 2,       // malformed input, bad flags, bad DGP document
  exit_estimation = 3,  // empty cells, singular mixture weights, optimizer failure
  exit_replications = 4,
};

/// `a:b:step` -> a, a + step, ... up to b inclusive.
std::vector<double> parse_grid(const std::string& spec);

/// LDTE_WORKERS when set to a positive integer, else the hardware concurrency.
int default_workers();

/// Entry point of the `ldte` tool; never throws.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ldte

#endif  // LDTE_CLI_HPP
