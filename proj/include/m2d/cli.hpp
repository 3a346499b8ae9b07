#pragma once

#include <string>
#include <vector>

namespace m2d {

// Parses and executes one invocation (argv without the program name).
// Exit codes: 0 success, 2 config or usage error, 3 data or io error,
// 4 divergence, 1 anything else.
int run_cli(const std::vector<std::string>& args);

}  // namespace m2d
