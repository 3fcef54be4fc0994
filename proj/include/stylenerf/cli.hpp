#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace stylenerf {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,    // bad arguments or configuration
  kExitFailure = 2,  // runtime failure, including missing prerequisite stages
};

/// Entry point of the `stylenerf` tool; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Process-wide malloc settings for long runs: freed tensor buffers stay in the
/// heap instead of going back to the kernel and faulting in again. No-op off glibc.
void tune_allocator();

}  // namespace stylenerf
