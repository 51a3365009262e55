#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmasd::cli {

/// Exit codes: 0 success, 1 bad input/config/usage, 2 I/O failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Display names of the 11 action classes, by label.
const std::vector<std::string>& action_names();

}  // namespace mmasd::cli
