#pragma once

#include <string>
#include <vector>

namespace gmoe::cli {

// Runs one subcommand. Exit codes: 0 success, 1 validation/usage failure,
// 2 runtime failure.
int run(std::vector<std::string> args);

}  // namespace gmoe::cli
