#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace gtcnn {

/// Runs one subcommand (train, denoise, eval, params, serve). `args`
/// excludes the program name. Returns 0 on success, 2 on validation errors
/// and 1 on other failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gtcnn
