#pragma once

#include "stone/evaluation.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace stone::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitData = 3,
    kExitCollapse = 4,
};

/// Runs the `stone` command line. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses "c,f,w" (KSEA), "c,f,r,p,w" (MIREX) or named "correct=..,fifth=..,
/// [relative=..,parallel=..,](wrong=..|total=..)". `with_mode` tells whether
/// relative and parallel counts were given. Throws ConfigError.
EvalCounts parse_counts(const std::string& text, bool& with_mode);

}  // namespace stone::cli
