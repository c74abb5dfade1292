#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lnerf::cli {

enum ExitCode : int { ok = 0, usage_error = 1, data_error = 2, diverged = 3 };

/// Runs one command line (argv[0] is the program name).  Results go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace lnerf::cli
