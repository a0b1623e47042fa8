// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <limits>

#include "common.hpp"

namespace chunkflow {

double const_sentinel(ScalarKind k) {
  return is_float(k) ? std::numeric_limits<double>::quiet_NaN() : scalar_max(k);
}

bool is_const_sentinel(double v, ScalarKind k) { return is_float(k) ? std::isnan(v) : v == scalar_max(k); }

namespace {

constexpr std::size_t kTableChunkElements = 4096;
constexpr std::size_t kChunksPerRequest = 32;

std::uint64_t table_chunk_edge(std::size_t d) {
  std::uint64_t e = 1;
  for (;;) {
    std::uint64_t p = 1;
    for (std::size_t i = 0; i < d; ++i) p *= e + 1;
    if (p > kTableChunkElements) return e;
    ++e;
  }
}

TensorMetaData table_md(const TensorMetaData& in) {
  const Coord grid = in.chunk_grid();
  const std::uint64_t e = table_chunk_edge(in.num_dims());
  Coord chunk(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) chunk[i] = std::min(grid[i], e);
  return TensorMetaData(grid, chunk, DataType{in.dtype.kind, 1});
}

EmbeddingData table_embedding(const OperatorPtr& in) {
  EmbeddingData e = in->embedding();
  for (std::size_t i = 0; i < e.spacing.size(); ++i)
    e.spacing[i] *= static_cast<double>(in->metadata().chunk_size[i]);
  return e;
}

// Uniform value of chunk h over its logical region, or the sentinel.
double chunk_uniform_value(const TensorMetaData& md, const Coord& h, std::span<const std::byte> chunk) {
  const Region r = chunk_logical_region(md, h);
  const Coord shape = detail::shape_of(r);
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<std::byte> dense(n * md.dtype.size());
  copy_box(chunk.data(), md.chunk_size, Coord(shape.size(), 0), dense.data(), shape, Coord(shape.size(), 0),
           shape, md.dtype.size());
  const std::size_t ss = scalar_size(md.dtype.kind);
  const double first = load_scalar(dense.data(), md.dtype.kind);
  for (std::uint64_t i = 1; i < n; ++i)
    if (load_scalar(dense.data() + i * ss, md.dtype.kind) != first) return const_sentinel(md.dtype.kind);
  return std::isnan(first) ? const_sentinel(md.dtype.kind) : first;
}

class ConstChunkTable : public OperatorBase<ConstChunkTable> {
 public:
  explicit ConstChunkTable(OperatorPtr in)
      : OperatorBase("const_chunk_table", {}, {in}, table_md(in->metadata()), table_embedding(in)),
        in_(std::move(in)) {}

  std::size_t max_batch() const override { return 1; }
  std::optional<double> known_uniform() const override { return in_->known_uniform(); }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const TensorMetaData& md = metadata();
    const TensorMetaData& imd = in_->metadata();
    for (const auto& h : positions) {
      Allocation out = co_await ctx.allocate_output();
      auto bytes = out.bytes();
      if (const auto u = known_uniform()) {
        co_await ctx.run([&md, &h, v = *u, bytes] { detail::fill_uniform(md, h, v, bytes); });
        ctx.commit(h, std::move(out));
        continue;
      }
      const Region r = chunk_logical_region(md, h);
      const Coord shape = detail::shape_of(r);
      std::vector<Coord> all = positions_in(r);
      std::vector<double> values(all.size());
      const std::size_t group = std::max<std::size_t>(1, std::min(kChunksPerRequest, ctx.config().max_requests_per_task));
      for (std::size_t first = 0; first < all.size(); first += group) {
        const std::size_t last = std::min(all.size(), first + group);
        std::vector<Coord> group(all.begin() + static_cast<std::ptrdiff_t>(first),
                                 all.begin() + static_cast<std::ptrdiff_t>(last));
        std::vector<ChunkRef> refs = co_await ctx.request(in_, group);
        std::vector<std::function<void()>> jobs;
        for (std::size_t i = 0; i < refs.size(); ++i) {
          const Coord& c = all[first + i];
          const ChunkRef& ref = refs[i];
          double* slot = &values[first + i];
          jobs.push_back([&imd, &c, &ref, slot] { *slot = chunk_uniform_value(imd, c, ref.bytes()); });
        }
        co_await ctx.run_all(std::move(jobs));
      }
      std::vector<std::byte> dense(values.size() * md.dtype.size());
      from_doubles(values, md.dtype, dense);
      std::memset(bytes.data(), 0, bytes.size());
      copy_box(dense.data(), shape, Coord(shape.size(), 0), bytes.data(), md.chunk_size, Coord(shape.size(), 0),
               shape, md.dtype.size());
      ctx.commit(h, std::move(out));
    }
  }

 private:
  OperatorPtr in_;
};

}  // namespace

OperatorPtr const_chunk_table(const OperatorPtr& in) {
  if (!in) throw InvalidArgument("const table input is null");
  if (in->metadata().dtype.lanes != 1) throw TypeMismatch("const chunk tables need a scalar element type");
  return std::make_shared<ConstChunkTable>(in);
}

}  // namespace chunkflow
