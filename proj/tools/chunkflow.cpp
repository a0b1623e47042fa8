// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <csignal>
#include <iostream>

#include "chunkflow/cli.hpp"

namespace {
extern "C" void on_signal(int) { chunkflow::request_serve_stop(); }
}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  return chunkflow::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
