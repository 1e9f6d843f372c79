#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace melodyflow {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;

/// Entry point of the melodyflow tool. Failures print one line
/// "error: <category>: <message>" to `err`.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);
int run(int argc, char** argv);

/// Identifier baked in at build time (git describe when available).
const char* build_id();

}  // namespace melodyflow
