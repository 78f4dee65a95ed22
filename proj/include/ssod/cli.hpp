#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ssod {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitInternal = 2;

/// Command-line entry point: simulate, mine, assign and check subcommands.
/// Returns 0 on success, 1 on validation failure, 2 on internal error.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace ssod
