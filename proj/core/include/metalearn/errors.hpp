#pragma once

#include <stdexcept>
#include <string>

namespace metalearn {

// Base class for everything thrown by this library. Subclasses map to CLI
// exit codes, so keep the hierarchy flat and the categories coarse.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape mismatch (bad matmul operands, concat of unequal extents, ...).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Math domain violation: log of a non-positive value, sqrt of a negative,
// division by zero.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(what) {}
};

// Autodiff misuse: differentiating a constant, mixing tapes, non-scalar
// objective.
class TapeError : public Error {
 public:
  explicit TapeError(const std::string& what) : Error(what) {}
};

// Invalid or inconsistent configuration (files, CLI flags, field values).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Reading or writing checkpoints, metrics, and reports.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

// Inner-loop blow-up. Carries the adaptation step at which the loss became
// non-finite or crossed the guard threshold; step -1 means the failure was
// batch-wide rather than tied to one step.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int step)
      : Error(step < 0 ? what
                       : what + " (inner step " + std::to_string(step) + ")"),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

}  // namespace metalearn
