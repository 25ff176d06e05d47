#pragma once

#include <string>
#include <vector>

namespace shiftipw::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(int argc, const char* const* argv);

}  // namespace shiftipw::cli
