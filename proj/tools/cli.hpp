#pragma once

#include <string>
#include <vector>

namespace lacap::cli {

// Runs one command line, program name excluded. Progress and errors go to
// stderr; returns the process exit code.
int run(const std::vector<std::string>& args);

}  // namespace lacap::cli
