#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace owps::cli {

inline constexpr const char* kToolVersion = "1.0.0";

// Runs one command (gen-data, train, eval, segment, grid, plot-loss-curves).
// Outputs are staged next to --out and moved into place only on success.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

}  // namespace owps::cli
