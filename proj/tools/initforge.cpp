// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "initforge/cli.hpp"

int main(int argc, char** argv) { return initforge::run_cli(argc, argv, std::cout, std::cerr); }
