#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace csm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Parses `args` (without the program name) and runs the chosen subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace csm::cli
