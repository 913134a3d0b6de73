#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spikecalib::cli {

// Runs one command line (without the program name). Reports go to `out`; errors are written to
// `err` as a JSON object and mapped to the exit codes 2 (usage), 3 (data), 4 (numeric).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spikecalib::cli
