// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chunkflow/element.hpp"

namespace chunkflow {

// Per-dimension integer vector: sizes, chunk sizes, global/chunk/local positions.
// Dimension 0 is the slowest varying one.
using Coord = std::vector<std::uint64_t>;

std::string to_string(const Coord& c);

struct TensorMetaData {
  Coord size;        // elements per dimension
  Coord chunk_size;  // elements per chunk per dimension
  DataType dtype = DataType::f32();

  TensorMetaData() = default;
  TensorMetaData(Coord size_, Coord chunk_size_, DataType dtype_);

  std::size_t num_dims() const { return size.size(); }
  // Throws InvalidArgument unless d >= 1, all sizes >= 1 and the type is valid.
  void validate() const;
  Coord chunk_grid() const;
  std::uint64_t num_chunks() const;
  std::uint64_t chunk_elements() const;
  std::uint64_t chunk_bytes() const { return chunk_elements() * dtype.size(); }
  bool contains_chunk(const Coord& h) const;

  friend bool operator==(const TensorMetaData&, const TensorMetaData&) = default;
};

// Physical interpretation: element spacing per dimension.
struct EmbeddingData {
  std::vector<double> spacing;

  static EmbeddingData unit(std::size_t dims) { return {std::vector<double>(dims, 1.0)}; }
  void validate(const TensorMetaData& md) const;
  std::vector<double> physical_size(const TensorMetaData& md) const;
  double min_spacing() const;

  friend bool operator==(const EmbeddingData&, const EmbeddingData&) = default;
};

struct ChunkCoords {
  Coord chunk_pos;
  Coord local_pos;
};

// Half-open box [begin, end).
struct Region {
  Coord begin;
  Coord end;
  std::uint64_t volume() const;
};

Coord chunk_grid_dims(const TensorMetaData& md);

// h_i = floor(g_i / C_i), l_i = g_i mod C_i. Throws InvalidCoordinate if g is outside S.
ChunkCoords global_to_chunk(const TensorMetaData& md, std::span<const std::uint64_t> g);

// Logical (unpadded) element range covered by chunk h.
Region chunk_logical_region(const TensorMetaData& md, const Coord& h);

// Row-major strides (in elements) for a dense block of the given shape.
Coord row_major_strides(const Coord& shape);

// Row-major linear index of h inside `grid`.
std::uint64_t linearize(const Coord& grid, const Coord& h);
Coord delinearize(const Coord& grid, std::uint64_t index);

// Border chunks are stored full size; zero every element outside the logical region.
void zero_chunk_padding(const TensorMetaData& md, const Coord& h, std::span<std::byte> chunk);

// 128-bit identity. Equality of ids is treated as equality of content.
struct Id128 {
  std::array<std::uint8_t, 16> bytes{};

  std::string hex() const;
  std::string short_hex() const { return hex().substr(0, 8); }
  std::uint64_t lo() const;
  std::uint64_t hi() const;
  friend auto operator<=>(const Id128&, const Id128&) = default;
};

struct OperatorId {
  Id128 value;
  friend auto operator<=>(const OperatorId&, const OperatorId&) = default;
};

struct ChunkId {
  Id128 value;
  friend auto operator<=>(const ChunkId&, const ChunkId&) = default;
};

// Canonical little-endian, length-prefixed parameter encoding.
class ParamWriter {
 public:
  ParamWriter& u8(std::uint8_t v);
  ParamWriter& u32(std::uint32_t v);
  ParamWriter& u64(std::uint64_t v);
  ParamWriter& i64(std::int64_t v);
  ParamWriter& f64(double v);
  ParamWriter& str(std::string_view s);
  ParamWriter& bytes(std::span<const std::byte> b);
  ParamWriter& coord(const Coord& c);
  ParamWriter& reals(std::span<const double> v);
  ParamWriter& dtype(DataType t);
  ParamWriter& id(const Id128& id);

  const std::vector<std::byte>& data() const& { return buf_; }
  std::vector<std::byte> take() && { return std::move(buf_); }

 private:
  std::vector<std::byte> buf_;
};

// First 16 bytes of SHA-256 over
//   enc("chunkflow.op.v1") enc(name) enc(params) u64(n) input_0 .. input_{n-1}
// where enc(x) = u64le(len(x)) || x and each input is its 16 id bytes.
OperatorId operator_id(std::string_view name, std::span<const std::byte> params,
                       std::span<const OperatorId> inputs);

// First 16 bytes of SHA-256 over
//   enc("chunkflow.chunk.v1") op_id(16) u64(d) u64(h_0) .. u64(h_{d-1})
ChunkId chunk_id(const OperatorId& op, std::span<const std::uint64_t> h);

// First 16 bytes of SHA-256 over enc("chunkflow.data.v1") enc(data); identifies array contents.
Id128 content_digest(std::span<const std::byte> data);

struct Id128Hash {
  std::size_t operator()(const Id128& id) const noexcept { return static_cast<std::size_t>(id.lo()); }
  std::size_t operator()(const OperatorId& id) const noexcept { return (*this)(id.value); }
  std::size_t operator()(const ChunkId& id) const noexcept { return (*this)(id.value); }
};

}  // namespace chunkflow
