#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace qallm {

// Runs one subcommand. args excludes the program name. Returns 0 on success,
// 1 on a usage error (synopsis printed to err), 2 on a runtime error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qallm
