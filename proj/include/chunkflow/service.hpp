// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>

#include "chunkflow/engine.hpp"
#include "chunkflow/operators.hpp"

namespace chunkflow {

// HTTP tile service. Endpoints (JSON unless noted):
//   GET  /datasets                      [{id, dims, size, chunk, levels, element_type, lanes}]
//   POST /sessions {dataset, kind, params}   -> {session, generation}; 404 unknown dataset, 400 bad params
//   GET  /sessions/{id}                 {session, dataset, kind, params, generation, width, height, tile}
//   PUT  /sessions/{id}/params {...}    merges into the params -> {generation}; 400 leaves the session unchanged
//   GET  /sessions/{id}/tile?x=&y=&gen= PNG with X-State: preview|final and X-Generation; 409 on a stale gen
//   GET  /sessions/{id}/status          {generation, tiles: {total, final}, bytes_read, store: {...}}
//   DELETE /sessions/{id}
//
// Session params by kind (all optional except where noted):
//   common:  width, height (default 1024), tf: [min, max]
//   image:   zoom, pan: [x, y]
//   slice:   dim, index (default: middle), zoom, pan, time (4-D datasets: index along dim 0 first)
//   raycast: camera: "auto" | {eye, look_at, up}, fov, compositing: "dvr" | "mop", es, lod_bias,
//            sample_distance_factor, preview_lod_offset, time (4-D datasets)
//
// A tile poll answers with the best tile available now. Raycast tiles start as previews; the
// final tile is computed in the background and, once done, returned unchanged for that generation.

inline constexpr const char* kListenEnv = "CHUNKFLOW_LISTEN";
inline constexpr const char* kDefaultListen = "127.0.0.1:8080";

struct ServiceConfig {
  EngineConfig engine;
  std::uint64_t tile_size = 512;
  // Location tiles are computed at; a device store must exist in `engine` for a device.
  Location render_location = Location::ram();
  std::size_t refine_threads = 1;
};

// "host:port"; throws InvalidArgument.
std::pair<std::string, int> parse_listen(const std::string& s);
// kListenEnv if set, else kDefaultListen.
std::string default_listen();

class TileService {
 public:
  explicit TileService(ServiceConfig cfg);
  ~TileService();
  TileService(const TileService&) = delete;
  TileService& operator=(const TileService&) = delete;

  void add_dataset(const std::string& id, LodPyramid pyramid);
  // Dataset id is the manifest's stem. Throws on an unreadable or invalid manifest.
  std::string add_manifest(const std::filesystem::path& manifest);

  // Binds and serves on a background thread. Port 0 picks a free port; returns the bound port.
  int start(const std::string& host, int port);
  void stop();

  Runtime& runtime();
  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace chunkflow
