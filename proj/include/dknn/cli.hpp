#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dknn::cli {

/// Runs one subcommand (`generate`, `fit`, `score`, `eval`, `spectrum`). `args` excludes the
/// program name. Machine-readable results go to `out`, diagnostics to `err`. Returns the
/// process exit status: 0 on success, 1 on a runtime failure, 2 on a usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dknn::cli
