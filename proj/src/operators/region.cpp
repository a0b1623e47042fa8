// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstring>

#include "common.hpp"

namespace chunkflow {

std::vector<Coord> chunks_overlapping(const TensorMetaData& md, const Region& r) {
  const std::size_t d = md.num_dims();
  if (r.begin.size() != d || r.end.size() != d) throw InvalidArgument("region dimension mismatch");
  Coord lo(d), hi(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (r.begin[i] >= r.end[i]) return {};
    if (r.end[i] > md.size[i]) throw InvalidCoordinate("region exceeds tensor size");
    lo[i] = r.begin[i] / md.chunk_size[i];
    hi[i] = (r.end[i] - 1) / md.chunk_size[i] + 1;
  }
  std::vector<Coord> out;
  Coord h = lo;
  for (;;) {
    out.push_back(h);
    std::size_t i = d;
    while (i-- > 0) {
      if (++h[i] < hi[i]) break;
      h[i] = lo[i];
    }
    if (i == static_cast<std::size_t>(-1)) break;
  }
  return out;
}

std::vector<Coord> positions_in(const Region& r) {
  const std::size_t d = r.begin.size();
  for (std::size_t i = 0; i < d; ++i)
    if (r.begin[i] >= r.end[i]) return {};
  std::vector<Coord> out;
  Coord c = r.begin;
  for (;;) {
    out.push_back(c);
    std::size_t i = d;
    while (i-- > 0) {
      if (++c[i] < r.end[i]) break;
      c[i] = r.begin[i];
    }
    if (i == static_cast<std::size_t>(-1)) break;
  }
  return out;
}

void copy_box(const std::byte* src, const Coord& src_shape, const Coord& src_origin, std::byte* dst,
              const Coord& dst_shape, const Coord& dst_origin, const Coord& extent, std::size_t elem) {
  const std::size_t d = extent.size();
  for (std::size_t i = 0; i < d; ++i)
    if (extent[i] == 0) return;
  const Coord ss = row_major_strides(src_shape);
  const Coord ds = row_major_strides(dst_shape);
  const std::size_t row = extent[d - 1] * elem;
  Coord c(d, 0);
  for (;;) {
    std::uint64_t so = 0, dof = 0;
    for (std::size_t i = 0; i < d; ++i) {
      so += (src_origin[i] + c[i]) * ss[i];
      dof += (dst_origin[i] + c[i]) * ds[i];
    }
    std::memcpy(dst + dof * elem, src + so * elem, row);
    std::size_t i = d - 1;
    while (i-- > 0) {
      if (++c[i] < extent[i]) break;
      c[i] = 0;
    }
    if (i == static_cast<std::size_t>(-1)) break;
  }
}

void gather_region(const TensorMetaData& md, const Region& r,
                   const std::function<std::span<const std::byte>(const Coord&)>& chunk_at,
                   std::span<std::byte> dst) {
  const std::size_t d = md.num_dims();
  const Coord shape = detail::shape_of(r);
  const std::size_t elem = md.dtype.size();
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  if (dst.size() != n * elem) throw ShapeMismatch("gather destination has the wrong size");
  for (const Coord& h : chunks_overlapping(md, r)) {
    const auto src = chunk_at(h);
    if (src.size() != md.chunk_bytes()) throw ShapeMismatch("gathered chunk has the wrong size");
    Coord src_origin(d), dst_origin(d), extent(d);
    for (std::size_t i = 0; i < d; ++i) {
      const std::uint64_t cb = h[i] * md.chunk_size[i];
      const std::uint64_t lo = std::max(cb, r.begin[i]);
      const std::uint64_t hi = std::min({cb + md.chunk_size[i], r.end[i], md.size[i]});
      src_origin[i] = lo - cb;
      dst_origin[i] = lo - r.begin[i];
      extent[i] = hi - lo;
    }
    copy_box(src.data(), md.chunk_size, src_origin, dst.data(), shape, dst_origin, extent, elem);
  }
}

std::vector<double> to_doubles(std::span<const std::byte> bytes, DataType t) {
  const std::size_t ss = scalar_size(t.kind);
  std::vector<double> out(bytes.size() / ss);
  visit_scalar(t.kind, [&]<class T>(std::type_identity<T>) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      T v;
      std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
      out[i] = static_cast<double>(v);
    }
  });
  return out;
}

void from_doubles(std::span<const double> values, DataType t, std::span<std::byte> out) {
  if (out.size() != values.size() * scalar_size(t.kind)) throw ShapeMismatch("value count mismatch");
  visit_scalar(t.kind, [&]<class T>(std::type_identity<T>) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T v = convert_to<T>(values[i]);
      std::memcpy(out.data() + i * sizeof(T), &v, sizeof(T));
    }
  });
}

namespace detail {

Coord shape_of(const Region& r) {
  Coord s(r.begin.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = r.end[i] - r.begin[i];
  return s;
}

void fill_uniform(const TensorMetaData& md, const Coord& h, double value, std::span<std::byte> out) {
  std::memset(out.data(), 0, out.size());
  const Region r = chunk_logical_region(md, h);
  const Coord shape = shape_of(r);
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<std::byte> dense(n * md.dtype.size());
  std::vector<std::byte> one(md.dtype.size());
  for (std::size_t l = 0; l < md.dtype.lanes; ++l)
    store_scalar(one.data() + l * scalar_size(md.dtype.kind), md.dtype.kind, value);
  for (std::uint64_t i = 0; i < n; ++i) std::memcpy(dense.data() + i * one.size(), one.data(), one.size());
  copy_box(dense.data(), shape, Coord(shape.size(), 0), out.data(), md.chunk_size,
           Coord(shape.size(), 0), shape, md.dtype.size());
}

Task<> per_chunk(TaskContext& ctx, const Operator& self, OperatorPtr in, std::vector<Coord> positions,
                 std::function<std::vector<Coord>(const Coord&)> deps, ChunkKernel kernel) {
  const TensorMetaData& md = self.metadata();
  if (const auto u = self.known_uniform()) {
    for (const auto& h : positions) {
      Allocation out = co_await ctx.allocate_output();
      auto bytes = out.bytes();
      const double v = *u;
      co_await ctx.run([&md, &h, v, bytes] { fill_uniform(md, h, v, bytes); });
      ctx.commit(h, std::move(out));
    }
    co_return;
  }

  // Groups of positions whose dependency union fits one request batch.
  const std::size_t limit = std::max<std::size_t>(1, ctx.config().max_requests_per_task);
  std::size_t next = 0;
  while (next < positions.size()) {
    std::map<Coord, std::size_t> index;
    std::vector<Coord> wanted;
    std::vector<Coord> group;
    for (; next < positions.size(); ++next) {
      std::vector<Coord> extra;
      for (auto& c : deps(positions[next]))
        if (!index.contains(c) && std::find(extra.begin(), extra.end(), c) == extra.end()) extra.push_back(std::move(c));
      if (!group.empty() && wanted.size() + extra.size() > limit) break;
      for (auto& c : extra) {
        index.emplace(c, wanted.size());
        wanted.push_back(std::move(c));
      }
      group.push_back(positions[next]);
    }
    std::vector<ChunkRef> refs = co_await ctx.request(in, wanted);

    std::vector<Allocation> outs;
    outs.reserve(group.size());
    for (std::size_t i = 0; i < group.size(); ++i) outs.push_back(co_await ctx.allocate_output());

    const ChunkLookup lookup = [&index, &refs](const Coord& c) {
      auto it = index.find(c);
      if (it == index.end()) throw InvalidArgument("kernel read chunk " + to_string(c) + " it did not request");
      return refs[it->second].bytes();
    };
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < group.size(); ++i) {
      auto bytes = outs[i].bytes();
      const Coord& h = group[i];
      jobs.push_back([&kernel, &lookup, &h, bytes] { kernel(h, lookup, bytes); });
    }
    co_await ctx.run_all(std::move(jobs));
    for (std::size_t i = 0; i < group.size(); ++i) ctx.commit(group[i], std::move(outs[i]));
  }
}

}  // namespace detail

}  // namespace chunkflow
