#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace probebench::cli {

/// Entry point of the `probebench` tool. Returns 0 on success, 1 on a
/// validation error or bad usage, 2 on a runtime failure.
int run(int argc, char** argv);

/// Same, with explicit arguments (without the program name) and streams.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace probebench::cli
