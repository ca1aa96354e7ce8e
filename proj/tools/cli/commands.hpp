#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace probpnp::cli {

enum ExitCode { kOk = 0, kInputError = 1, kNumericalFailure = 2, kTrainingAbort = 3 };

/// Runs one command line. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace probpnp::cli
