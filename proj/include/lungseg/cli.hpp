#pragma once

#include <iosfwd>

namespace lungseg {

/// Entry point of the `lungseg` tool. Returns 0 on success, 1 on invalid
/// input (bad flags, configs, shapes or a failed check), 2 on I/O failure.
int run_cli(int argc, char** argv);
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace lungseg
