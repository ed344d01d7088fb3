// SPDX-License-Identifier: Apache-2.0
//
// The `moeplan` command line. Exposed as a function so tests and
// `report --verify` can run commands in-process.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace moeplan::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kNoFeasiblePlan = 3,
  kParseError = 4,
};

struct RunOptions {
  bool write_outputs = true;  // false: compute the report without touching files
};

struct RunResult {
  int exit_code = kOk;
  nlohmann::json report;  // {"manifest": ..., "result": ...} when the command succeeded
};

// `args` excludes the program name.
RunResult run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
              const RunOptions& options = {});

int main(int argc, char** argv);

const char* version();

}  // namespace moeplan::cli
