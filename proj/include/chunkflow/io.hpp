// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chunkflow/operators.hpp"

namespace chunkflow {

// ---- Chunked tensor files ----
//
// Little-endian layout:
//   "PLCT"  version:u32  element_type:u8  lanes:u8  d:u8
//   S: d x u64   C: d x u64   spacing: d x f64
//   offsets: u64 per chunk in row-major chunk order (0 = absent, reads as zeros)
//   payloads: product(C) x element size bytes each, padding included

inline constexpr std::uint32_t kChunkedFileVersion = 1;

struct ChunkedFileHeader {
  TensorMetaData md;
  EmbeddingData embedding;
  std::vector<std::uint64_t> offsets;

  std::uint64_t header_bytes() const;
  std::vector<std::byte> encode() const;
  // Throws FormatError naming `path` on a bad magic, version or field.
  static ChunkedFileHeader decode(std::span<const std::byte> bytes, const std::string& path);
};

// Header of a chunked file; also checks that every payload lies inside the file.
ChunkedFileHeader read_chunked_header(const std::filesystem::path& path);

// Converts a dense row-major array file of shape md.size into a chunked file. Throws
// ShapeMismatch when the file size differs from the declared shape, IoError on I/O failure.
void import_raw(const std::filesystem::path& raw, const std::filesystem::path& out, const TensorMetaData& md,
                const EmbeddingData& embedding);

// Source node backed by a chunked file. Each chunk is one positioned read on a worker.
OperatorPtr open_chunked(const std::filesystem::path& path);

struct SaveOptions {
  std::size_t chunks_per_batch = 0;  // 0: a quarter of the RAM store per batch
};

// Resolves every chunk of `node` (Final state) in row-major batches and writes a chunked file.
// The file is written under a temporary name and renamed when complete.
void save_tensor(Runtime& rt, const OperatorPtr& node, const std::filesystem::path& path, SaveOptions opts = {});

// ---- Pyramid manifests ----
//
// JSON document:
//   {"format": "chunkflow-pyramid", "version": 1,
//    "levels": [{"path": "...", "spacing": [...], "const_table": "..." (optional)}, ...]}
// Relative paths are resolved against the manifest's directory.

struct PyramidManifest {
  struct Level {
    std::filesystem::path path;
    std::vector<double> spacing;
    std::optional<std::filesystem::path> const_table;
  };
  std::vector<Level> levels;

  static PyramidManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  // Opens every level (and const table); throws InvalidArgument unless it forms a valid pyramid
  // whose spacings match the files.
  LodPyramid open() const;
};

// Writes level k+1 of build_lod from the saved level k, one level at a time, into files next to
// the manifest (<stem>_L<k>.plct, <stem>_L<k>_const.plct), then writes the manifest.
PyramidManifest build_lod_offline(Runtime& rt, const std::filesystem::path& input,
                                  const std::filesystem::path& manifest, bool const_tables = false);

// ---- PNG ----

struct RgbaImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGBA8
};

std::vector<std::uint8_t> encode_png(const RgbaImage& image);
RgbaImage decode_png(std::span<const std::uint8_t> png);
void write_png(const std::filesystem::path& path, const RgbaImage& image);
RgbaImage read_png(const std::filesystem::path& path);

}  // namespace chunkflow
