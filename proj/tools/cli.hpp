#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bitr {

/// Runs one command line (without the program name). Returns 0 on success,
/// 1 on a usage error, 2 on a data error or failed check.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bitr
