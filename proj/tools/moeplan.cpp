// SPDX-License-Identifier: Apache-2.0

#include "moeplan/cli.hpp"

int main(int argc, char** argv) { return moeplan::cli::main(argc, argv); }
