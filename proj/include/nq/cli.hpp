#pragma once

#include <iosfwd>

namespace nq {

// Entry point of the nq command. Returns the process exit status:
// 0 ok, 2 config error, 3 IO error, 4 infeasible target, 5 numeric failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace nq
