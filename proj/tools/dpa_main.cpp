// SPDX-License-Identifier: Apache-2.0

#include "dpa/harness.hpp"

int main(int argc, char** argv) { return dpa::harness::run_cli(argc, argv); }
