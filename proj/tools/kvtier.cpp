// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "kvtier/cli.hpp"

int main(int argc, char** argv) { return kvtier::run_cli(argc, argv, std::cout, std::cerr); }
