#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gbm::cli {

enum ExitCode { kOk = 0, kUsage = 2, kInput = 3, kNumeric = 4 };

// Runs the command line with the given arguments (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gbm::cli
