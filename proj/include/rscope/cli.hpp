#pragma once

#include <ostream>

namespace rscope {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `rscope` command. Payloads go to `out`, diagnostics to
// `err`; with --format json errors are a single JSON line on `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rscope
