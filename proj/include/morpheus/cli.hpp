#pragma once

#include <iosfwd>

namespace morpheus::cli {

// Exit codes: 0 success, 1 usage, 2 data or checkpoint, 3 numerical failure.
int run(int argc, const char* const* argv);
int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace morpheus::cli
