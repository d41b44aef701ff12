#pragma once

#include <iosfwd>

namespace mmk {

// Exit codes: 0 success, 1 validation error (bad flags, config, schema,
// dataset, I/O), 2 runtime or numeric error (including a failed gradient
// check or a failed ablation run).
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// The `mmk` command line. Output goes to `out`, diagnostics to `err`;
// `in` backs `--input -`.
int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace mmk
