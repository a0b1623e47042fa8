// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chunkflow/engine.hpp"

namespace chunkflow {

// ---- Region utilities -------------------------------------------------------------------------

// Chunk positions whose logical region intersects `r` (row-major order).
std::vector<Coord> chunks_overlapping(const TensorMetaData& md, const Region& r);

// Every position of the box `r` in row-major order.
std::vector<Coord> positions_in(const Region& r);

// Copies the box `extent` from src (dense, shape src_shape, starting at src_origin) to dst
// (dense, shape dst_shape, starting at dst_origin). Element size in bytes is `elem`.
void copy_box(const std::byte* src, const Coord& src_shape, const Coord& src_origin, std::byte* dst,
              const Coord& dst_shape, const Coord& dst_origin, const Coord& extent, std::size_t elem);

// Fills `dst` (dense, shape r.end - r.begin) with the elements of region `r` taken from chunks.
// `chunk_at(h)` returns the payload of chunk h, which must cover its part of r.
void gather_region(const TensorMetaData& md, const Region& r,
                   const std::function<std::span<const std::byte>(const Coord&)>& chunk_at,
                   std::span<std::byte> dst);

// Element values of a dense buffer as doubles (lanes interleaved).
std::vector<double> to_doubles(std::span<const std::byte> bytes, DataType t);
void from_doubles(std::span<const double> values, DataType t, std::span<std::byte> out);

// ---- Sources ----------------------------------------------------------------------------------

// Copies of a dense row-major array. Throws ShapeMismatch unless data.size() equals the element
// count times the element size.
OperatorPtr source_from_array(std::vector<std::byte> data, TensorMetaData md, EmbeddingData embedding);

// Pure function of the global element position. Every lane of an element gets the same value.
using Generator = std::function<double(std::span<const std::uint64_t>)>;

// `name` and `params` identify the generator; two sources with equal name, params and metadata
// must produce equal data.
OperatorPtr source_procedural(std::string name, std::vector<std::byte> params, Generator gen,
                              TensorMetaData md, EmbeddingData embedding);

OperatorPtr constant_source(double value, TensorMetaData md, EmbeddingData embedding);

// Mandelbulb of power 8 (triplex iteration z <- z^8 + c from z = 0, bailout radius 2, at most 8
// iterations). Points inside give 1. Escaping points give the smoothed iteration count
// n + 1 - log(log|z| / log 2) / log 8 divided by 8 and clamped to [0, 1], where n is the index
// (from 0) of the iteration after which |z| > 2.
double mandelbulb_value(double x, double y, double z);

// 3-D source over the cube [-1.2, 1.2]^3. Element (g0, g1, g2) samples the voxel centre with
// x along dimension 2, y along dimension 1 and z along dimension 0.
OperatorPtr mandelbulb_source(TensorMetaData md, EmbeddingData embedding);

// ---- Pointwise expressions --------------------------------------------------------------------

class Expr {
 public:
  enum class Op : std::uint8_t { Input, Const, Add, Sub, Mul, Div, Abs, Min, Max, Cast };

  struct Node {
    Op op;
    OperatorPtr input;  // Input
    double value = 0;   // Const
    DataType cast_to{};  // Cast
    std::vector<std::shared_ptr<const Node>> args;
  };

  explicit Expr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  const std::shared_ptr<const Node>& node() const { return node_; }

  Expr abs() const;
  Expr cast(DataType t) const;

 private:
  std::shared_ptr<const Node> node_;
};

Expr input(OperatorPtr op);
Expr constant(double v);
Expr operator+(const Expr& a, const Expr& b);
Expr operator-(const Expr& a, const Expr& b);
Expr operator*(const Expr& a, const Expr& b);
Expr operator/(const Expr& a, const Expr& b);
Expr abs(const Expr& a);
Expr min(const Expr& a, const Expr& b);
Expr max(const Expr& a, const Expr& b);
Expr cast(const Expr& a, DataType t);

// Tensor computing `e` per element. Every node's result is rounded to its element type, so
// evaluation order and fusion never change a value. With `fuse`, inputs that are themselves
// pointwise nodes are inlined, and no chunk of theirs is materialized.
// Throws TypeMismatch when typed operands differ without an explicit cast, ShapeMismatch when
// input tensors differ in size or chunk size.
OperatorPtr pointwise(const Expr& e, bool fuse = true);
OperatorPtr cast(const OperatorPtr& in, DataType t);

// Number of operations in the (possibly fused) expression of a pointwise node; 0 otherwise.
std::size_t fused_op_count(const Operator& op);

// ---- Convolution ------------------------------------------------------------------------------

struct SeparableKernel {
  std::vector<std::vector<double>> per_dim;  // odd length each; {1} is the identity

  static SeparableKernel uniform(std::size_t dims, std::vector<double> k);
  static SeparableKernel binomial(std::size_t dims) { return uniform(dims, {0.25, 0.5, 0.25}); }
  void validate(const TensorMetaData& md) const;
};

// Separable convolution with clamp-to-edge borders:
//   out[x] = sum_j k[j] * in[clamp(x + r - j)] along each dimension in turn (dimension 0 first),
// accumulated in double precision and rounded to the input element type once.
OperatorPtr separable_conv(const OperatorPtr& in, SeparableKernel kernel);

// Chunks of `in` read when computing output chunk h.
std::vector<Coord> conv_dependencies(const TensorMetaData& md, const SeparableKernel& k, const Coord& h);

// ---- Slicing and resampling -------------------------------------------------------------------

// (d-1)-dimensional tensor at `index` along `dim`.
OperatorPtr slice(const OperatorPtr& in, std::size_t dim, std::uint64_t index);

// Halves the selected dimensions (output size ceil(S/2)); each element is the mean of the valid
// elements of its 2^k block; spacing doubles along the selected dimensions.
OperatorPtr downsample_mean(const OperatorPtr& in, std::vector<bool> dims);

struct LodPyramid {
  std::vector<OperatorPtr> levels;  // level 0 is full resolution
  std::vector<OperatorPtr> const_tables;  // optional: const_chunk_table of each level

  // Throws InvalidArgument unless physical sizes agree within one element spacing and sizes
  // (spacings) do not increase (decrease) with level.
  void validate() const;
  std::size_t size() const { return levels.size(); }
  const OperatorPtr& operator[](std::size_t i) const { return levels.at(i); }
};

// Level k+1 = downsample_mean(separable_conv(level k, binomial)) along every dimension still
// larger than its chunk size, until no such dimension remains.
LodPyramid build_lod(const OperatorPtr& in);
// One step of that rule; null when no dimension is larger than its chunk size.
OperatorPtr lod_next_level(const OperatorPtr& in);
LodPyramid single_level_lod(const OperatorPtr& in);

// ---- Const chunk table ------------------------------------------------------------------------

// Marker for a chunk that is not uniform: NaN for floating types, the type maximum otherwise.
double const_sentinel(ScalarKind k);
bool is_const_sentinel(double v, ScalarKind k);

// Tensor over the chunk grid of a scalar tensor: each element is the chunk's uniform value
// (over its logical region) or the sentinel. Spacing is the input spacing times the chunk size.
OperatorPtr const_chunk_table(const OperatorPtr& in);

}  // namespace chunkflow
