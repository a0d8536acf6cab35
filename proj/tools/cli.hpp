// Command-line front end: estimate, tune, diagnose and simulate from a JSON
// run configuration.
#pragma once

#include <string>
#include <vector>

namespace lpsa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDataError = 2;
inline constexpr int kExitNumericalError = 3;

// Parses argv and runs the requested subcommand. Returns the process exit
// code; error messages go to stderr.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace lpsa::cli
