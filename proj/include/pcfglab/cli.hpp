#pragma once

namespace pcfglab {

// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
int cli_dispatch(int argc, const char* const* argv);

}  // namespace pcfglab
