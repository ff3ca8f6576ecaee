// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kdforge::cli {

/// Runs one command. Exit codes: 0 success, 1 usage, 2 data, 3 divergence.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Shortest round-trip style rendering used in run headers ("2.0", "5e-5").
std::string format_number(double v);

}  // namespace kdforge::cli
