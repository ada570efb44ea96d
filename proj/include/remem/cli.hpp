#pragma once

#include <ostream>

namespace remem::cli {

/// Exit codes: 0 success, 1 validation or input error, 2 numerical failure.
inline constexpr int kOk = 0;
inline constexpr int kValidation = 1;
inline constexpr int kNumerical = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace remem::cli
