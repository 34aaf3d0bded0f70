#pragma once

namespace tokval {

/// Exit codes: 0 success, 1 internal error or failed check, 2 usage/config error.
int run_cli(int argc, char** argv);

}  // namespace tokval
