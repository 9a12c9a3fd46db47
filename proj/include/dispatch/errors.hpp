#pragma once

#include <stdexcept>
#include <string>

namespace dispatch {

// Base for all domain errors; CLI maps these to exit code 1.
struct DispatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : DispatchError {
  ParseError(const std::string& msg, int line, int col)
      : DispatchError("parse error at " + std::to_string(line) + ":" +
                      std::to_string(col) + ": " + msg),
        line(line), col(col) {}
  int line, col;
};

struct ValidationError : DispatchError {
  using DispatchError::DispatchError;
};

struct IslandingError : DispatchError {
  using DispatchError::DispatchError;
};

struct DimensionMismatch : DispatchError {
  using DispatchError::DispatchError;
};

struct NumericallySingular : DispatchError {
  using DispatchError::DispatchError;
};

struct SingularJacobian : DispatchError {
  using DispatchError::DispatchError;
};

struct NonConvergence : DispatchError {
  using DispatchError::DispatchError;
};

struct SolvabilityBoundary : DispatchError {
  SolvabilityBoundary(const std::string& msg, int hour, int island)
      : DispatchError(msg), hour(hour), island(island) {}
  int hour, island;
};

struct StepFailure : DispatchError {
  using DispatchError::DispatchError;
};

struct QPInfeasible : DispatchError {
  using DispatchError::DispatchError;
};

struct NotConverged : DispatchError {
  using DispatchError::DispatchError;
};

struct GridTooLarge : DispatchError {
  using DispatchError::DispatchError;
};

struct NoFeasiblePoint : DispatchError {
  using DispatchError::DispatchError;
};

struct IoError : DispatchError {
  using DispatchError::DispatchError;
};

}  // namespace dispatch
