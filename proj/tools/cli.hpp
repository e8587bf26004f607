// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace peftlab::cli {

// sysexits-style codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitStrict = 2;     // ingest --strict saw skipped pairs or files
inline constexpr int kExitUsage = 64;     // bad flags or configuration
inline constexpr int kExitDataErr = 65;   // input exists but is corrupt
inline constexpr int kExitNoInput = 66;   // input file or directory missing
inline constexpr int kExitSoftware = 70;  // anything else

// Runs one invocation. `args` excludes the program name. Data goes to `out`,
// diagnostics to `err`; `in` feeds the chat REPL.
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace peftlab::cli
