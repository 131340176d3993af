#pragma once

#include <iosfwd>

namespace sal_lab {

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitCheckFailed = 3;

/// Subcommands generate, train, eval, gradcheck and inspect. Returns 0 on
/// success, 1 for usage errors (usage text goes to `err`), 2 for runtime
/// failures and 3 when a gradient check fails. Reads no environment state
/// except SAL_LAB_THREADS, the generator's worker count.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sal_lab
