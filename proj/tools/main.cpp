// SPDX-License-Identifier: Apache-2.0
#include "assl/cli.hpp"

#include <iostream>

int main(int argc, char **argv) { return assl::run_cli(argc, argv, std::cout, std::cerr); }
