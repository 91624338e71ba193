#ifndef LDTE_ERROR_HPP
#define LDTE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace ldte {

// Base for every failure the library reports. The CLI maps the subclasses
// onto exit codes, so keep new errors inside this hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed user input: CSV parse failures, bad DGP documents, non-binary d.
class InputError : public Error {
 public:
  using Error::Error;
};

// Inconsistent options (K too large for brute-force matching, bad grids).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A partition whose cuts collapse or whose cells come out empty.
class DegeneratePartition : public Error {
 public:
  using Error::Error;
};

// A (d, z) cell with no observations where a conditional probability is needed.
class InsufficientSupport : public Error {
 public:
  using Error::Error;
};

// A mixture-weight matrix that cannot be inverted safely.
class RankDeficiency : public Error {
 public:
  RankDeficiency(const std::string& what, double smallest_singular_value)
      : Error(what), sigma_min_(smallest_singular_value) {}
  double smallest_singular_value() const { return sigma_min_; }

 private:
  double sigma_min_;
};

// Optimizer failures that should not happen with well-formed inputs.
class EstimationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ldte

#endif  // LDTE_ERROR_HPP
