#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kdstage::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // assertion or acceptance failure
  kExitUsage = 2,    // usage or configuration error
  kExitIo = 3,       // I/O error or corrupt data
};

// Runs one command line; args[0] is the program name. Reports go to `out`,
// progress and errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kdstage::cli
