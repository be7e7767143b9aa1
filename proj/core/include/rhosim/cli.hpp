#pragma once

#include <string>
#include <vector>

namespace rhosim::cli {

/// Subcommand dispatch. Exit codes: 0 success, 1 runtime error, 2 usage error.
/// Every error path prints a single `error[<code>]: ...` line to stderr.
int dispatch(int argc, char** argv);
int dispatch(const std::vector<std::string>& args);

}  // namespace rhosim::cli
