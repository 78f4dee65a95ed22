#pragma once

#include <stdexcept>
#include <string>

namespace ssod {

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Assignment problem without a feasible solution (fewer proposals than targets).
struct Infeasible : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mixture fit impossible: too few samples or zero spread.
struct DegenerateFit : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Loss flavor supplied for the wrong training stage.
struct StageMismatch : std::logic_error {
  using std::logic_error::logic_error;
};

/// Configuration or input validation failure, carrying the offending key path and line.
struct ConfigError : std::runtime_error {
  ConfigError(std::string key_path, int line, const std::string& what)
      : std::runtime_error(format(key_path, line, what)), key(std::move(key_path)), line(line) {}

  std::string key;
  int line;

 private:
  static std::string format(const std::string& key, int line, const std::string& what) {
    std::string out = key.empty() ? std::string("config") : key;
    if (line > 0) out += " (line " + std::to_string(line) + ")";
    return out + ": " + what;
  }
};

}  // namespace ssod
