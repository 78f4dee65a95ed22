#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace ssod {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfcheckSummary {
  std::vector<CheckOutcome> outcomes;

  std::size_t passed() const;
  std::size_t failed() const;
};

/// Oracle and property suite: Hungarian against brute force, analytic loss
/// gradients against central differences, mixture recovery on seeded bimodal
/// samples, decoder leakage under the group mask, EMA closed form and NMS
/// idempotence. Writes one line per check to log.
SelfcheckSummary run_selfcheck(std::ostream& log, std::uint64_t seed = 0);

}  // namespace ssod
