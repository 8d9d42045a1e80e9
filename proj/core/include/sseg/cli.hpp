#pragma once

#include <iosfwd>

namespace sseg {

/// Entry point behind the sseg binary: dispatches argv[1] to a subcommand
/// (synth, pseudomask, train, infer, eval, selftrain). Every subcommand
/// accepts --config FILE plus --<key> <value> flags; flags override file
/// values, which override built-in defaults, and the resolved set is written
/// into the run's output directory as config_resolved.cfg. Returns the
/// process exit code: 0 success, 1 usage error (help printed), 2 runtime
/// failure (diagnostic printed).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sseg
