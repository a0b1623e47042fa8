// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chunkflow/chunk_model.hpp"

namespace chunkflow {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Runs `chunkflow <command> [flags]`; args[0] is the program name. Commands:
//   import     --shape --chunk --type [--spacing] --input --output
//   build-lod  --input --output [--const-table] [--ram-budget]
//   render     --manifest --output [--frame WxH] [--tile WxH] [--fov] [--camera auto|eye/lookat/up]
//              [--compositing dvr|mop] [--tf min,max] [--es on|off] [--ram-budget] [--device-budget] [--timing]
//   serve      --manifest... [--listen host:port] [--ram-budget] [--device-budget] [--tile-size]
// build-lod, render and serve also take --max-requests and --max-active (engine concurrency limits).
//   info       <file.plct | manifest.json>
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Makes a running `serve` command return.
void request_serve_stop();

// "5x5" or "5,5" -> {5, 5}.
Coord parse_extent(const std::string& s);
// "64M", "1G", "4096", "512K" (binary units) -> bytes.
std::uint64_t parse_bytes(const std::string& s);

}  // namespace chunkflow
