#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace crft {

/// Entry point of the `crft` tool. `args` excludes the program name.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime failure.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace crft
