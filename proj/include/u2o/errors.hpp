#pragma once

#include <stdexcept>
#include <string>

namespace u2o {

// Base for everything this library throws on contract violations.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- Configuration errors (CLI exit code 1) ---
struct ConfigError : Error {
  using Error::Error;
};
struct UnknownKey : ConfigError {
  explicit UnknownKey(const std::string& key) : ConfigError("unknown config key: " + key) {}
};
struct MissingRequired : ConfigError {
  explicit MissingRequired(const std::string& key) : ConfigError("missing required config key: " + key) {}
};
struct RangeViolation : ConfigError {
  explicit RangeViolation(const std::string& what) : ConfigError("config value out of range: " + what) {}
};

// --- Numeric failure (CLI exit code 2) ---
struct NumericalFailure : Error {
  using Error::Error;
};

// --- Domain errors ---
struct Unreachable : Error {
  using Error::Error;
};
struct DegenerateReward : Error {
  using Error::Error;
};
struct GoalIndistinct : Error {
  using Error::Error;
};
struct NoPenultimateLayer : Error {
  using Error::Error;
};
struct InsufficientStats : Error {
  using Error::Error;
};

}  // namespace u2o
