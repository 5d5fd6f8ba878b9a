#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace approxmpc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// Raised when a simulated state becomes non-finite or leaves the plant box.
class IntegrationDiverged : public Error {
 public:
  IntegrationDiverged(std::size_t step, const std::string& what)
      : Error("integration diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class RankDeficiency : public Error {
 public:
  RankDeficiency(int numerical_rank, const std::string& what)
      : Error(what + " (numerical rank " + std::to_string(numerical_rank) + ")"),
        numerical_rank_(numerical_rank) {}
  int numerical_rank() const { return numerical_rank_; }

 private:
  int numerical_rank_;
};

class PersistenceOfExcitation : public Error {
 public:
  using Error::Error;
};

class DatasetTooShort : public Error {
 public:
  using Error::Error;
};

class LinearizationError : public Error {
 public:
  using Error::Error;
};

class ScalingDegenerate : public Error {
 public:
  explicit ScalingDegenerate(const std::string& channel)
      : Error("scaling degenerate: channel " + channel + " is constant"), channel_(channel) {}
  const std::string& channel() const { return channel_; }

 private:
  std::string channel_;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

class Infeasible : public Error {
 public:
  using Error::Error;
};

/// Configuration problems; the CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace approxmpc
