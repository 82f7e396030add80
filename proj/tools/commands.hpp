#pragma once

// The htwa command line: gen-data, train-stage1, train-stage2,
// eval-retrieval, gradcheck and analyze-cost.
//
// Configuration precedence (later wins): built-in defaults, --preset,
// --config file, --set assignments in order, HTWA_SEED, --seed.

#include <ostream>
#include <string>
#include <vector>

namespace htwa::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,     // numerical failure: divergence, gradient mismatch
  kUsage = 2,       // bad flags, invalid config, missing inputs
};

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace htwa::cli
