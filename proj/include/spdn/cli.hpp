#pragma once

// Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime
// failure.

#include <string>
#include <vector>

namespace spdn {

// args excludes the program name
int cli_run(const std::vector<std::string>& args);

}  // namespace spdn
