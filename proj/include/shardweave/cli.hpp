#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace shardweave {

/// Runs one CLI invocation. `args` holds the arguments after the program
/// name. Returns the process exit code: 0 on success, 1 when a tolerance or
/// validation check fails, 2 on usage errors.
int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout,
             std::ostream& err = std::cerr);

}  // namespace shardweave
