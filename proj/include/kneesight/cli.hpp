#pragma once

// Command-line entry point, callable in-process so integration tests can run
// whole pipelines without spawning the binary.

#include <string>
#include <vector>

namespace kneesight::cli {

// Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
int run(const std::vector<std::string>& args);

}  // namespace kneesight::cli
