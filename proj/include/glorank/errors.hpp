#ifndef GLORANK_ERRORS_HPP_
#define GLORANK_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace glorank {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// malformed input file contents
struct ParseError : Error {
  using Error::Error;
};

// data violates a structural invariant (duplicate ids, dimension mismatch, ...)
struct IntegrityError : Error {
  using Error::Error;
};

// caller passed an out-of-contract argument
struct ArgumentError : Error {
  using Error::Error;
};

// an action was rejected by a constraint (illegal token, invalid list, ...)
struct ConstraintError : Error {
  using Error::Error;
};

// an operation was applied in a state that forbids it (double prune, ...)
struct StateError : Error {
  using Error::Error;
};

// a required input artifact is absent
struct MissingInputError : Error {
  using Error::Error;
};

// NaN/Inf or other numerical breakdown during a run
struct NumericalError : Error {
  using Error::Error;
};

// experiment configuration rejected by validation
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace glorank

#endif  // GLORANK_ERRORS_HPP_
