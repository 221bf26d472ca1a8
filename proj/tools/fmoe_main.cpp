// SPDX-License-Identifier: Apache-2.0
#include "fmoe/cli/cli.hpp"

int main(int argc, char** argv) { return fmoe::cli::run(argc, argv); }
