#pragma once
// Command-line entry point (also callable from tests).
//
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

namespace denoise {

int cli_main(int argc, const char* const* argv);

}  // namespace denoise
