#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cae::cli {

enum ExitCode { ok = 0, usage = 2, data_error = 3, numeric_failure = 4 };

// Runs one command line (args[0] is the program name). Results go to `out`,
// logs and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cae::cli
