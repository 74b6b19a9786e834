#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mpq {

/// Process exit codes.
enum ExitCode : int {
    kExitOk = 0,
    kExitInput = 1,       ///< malformed or missing input
    kExitConstraint = 2,  ///< a memory budget is violated or unreachable
    kExitUsage = 64,
};

inline constexpr const char* kToolVersion = "0.1.0";

/// Runs one command line (`args` excludes the program name). Output and
/// diagnostics go to the given streams; nothing calls exit().
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

}  // namespace mpq
