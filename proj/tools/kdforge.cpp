// SPDX-License-Identifier: Apache-2.0
#include "kdforge/cli.hpp"

int main(int argc, char** argv) { return kdforge::cli::run(argc, argv); }
