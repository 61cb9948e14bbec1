#pragma once

#include <string>
#include <vector>

namespace evflow::cli {

enum ExitCode : int { ok = 0, config_error = 2, io_error = 3, numerical_failure = 4 };

// args[0] is the program name.
int run(const std::vector<std::string>& args);

}  // namespace evflow::cli
