#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace magma {

// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
// arguments. Every failure writes one line "error[E_CODE]: message" to err.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace magma
