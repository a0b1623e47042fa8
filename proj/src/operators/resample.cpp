// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>

#include "common.hpp"

namespace chunkflow {

namespace {

template <class T>
std::vector<T> erase_at(std::vector<T> v, std::size_t i) {
  v.erase(v.begin() + static_cast<std::ptrdiff_t>(i));
  return v;
}

template <class T>
std::vector<T> insert_at(std::vector<T> v, std::size_t i, T x) {
  v.insert(v.begin() + static_cast<std::ptrdiff_t>(i), x);
  return v;
}

class Slice : public OperatorBase<Slice> {
 public:
  Slice(OperatorPtr in, std::size_t dim, std::uint64_t index)
      : OperatorBase("slice", ParamWriter().u64(dim).u64(index).data(), {in},
                     TensorMetaData(erase_at(in->metadata().size, dim), erase_at(in->metadata().chunk_size, dim),
                                    in->metadata().dtype),
                     EmbeddingData{erase_at(in->embedding().spacing, dim)}),
        in_(std::move(in)),
        dim_(dim),
        index_(index) {}

  std::optional<double> known_uniform() const override { return in_->known_uniform(); }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const std::uint64_t c = in_->metadata().chunk_size[dim_];
    co_await detail::per_chunk(
        ctx, *this, in_, std::move(positions),
        [this, c](const Coord& h) { return std::vector<Coord>{insert_at(h, dim_, index_ / c)}; },
        [this, c](const Coord& h, const detail::ChunkLookup& lookup, std::span<std::byte> out) {
          const TensorMetaData& imd = in_->metadata();
          const auto src = lookup(insert_at(h, dim_, index_ / c));
          Coord origin(imd.num_dims(), 0);
          origin[dim_] = index_ % c;
          Coord extent = imd.chunk_size;
          extent[dim_] = 1;
          copy_box(src.data(), imd.chunk_size, origin, out.data(), extent, Coord(imd.num_dims(), 0), extent,
                   imd.dtype.size());
        });
  }

 private:
  OperatorPtr in_;
  std::size_t dim_;
  std::uint64_t index_;
};

TensorMetaData halved(const TensorMetaData& md, const std::vector<bool>& dims) {
  Coord size = md.size;
  for (std::size_t i = 0; i < size.size(); ++i)
    if (dims[i]) size[i] = (size[i] + 1) / 2;
  return TensorMetaData(size, md.chunk_size, md.dtype);
}

EmbeddingData doubled(const EmbeddingData& e, const std::vector<bool>& dims) {
  EmbeddingData out = e;
  for (std::size_t i = 0; i < out.spacing.size(); ++i)
    if (dims[i]) out.spacing[i] *= 2.0;
  return out;
}

std::vector<std::byte> encode_dims(const std::vector<bool>& dims) {
  ParamWriter w;
  w.u64(dims.size());
  for (bool b : dims) w.u8(b ? 1 : 0);
  return std::move(w).take();
}

class DownsampleMean : public OperatorBase<DownsampleMean> {
 public:
  DownsampleMean(OperatorPtr in, std::vector<bool> dims)
      : OperatorBase("downsample_mean", encode_dims(dims), {in}, halved(in->metadata(), dims),
                     doubled(in->embedding(), dims)),
        in_(std::move(in)),
        dims_(std::move(dims)) {}

  std::optional<double> known_uniform() const override { return in_->known_uniform(); }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    co_await detail::per_chunk(
        ctx, *this, in_, std::move(positions),
        [this](const Coord& h) { return chunks_overlapping(in_->metadata(), source_region(h)); },
        [this](const Coord& h, const detail::ChunkLookup& lookup, std::span<std::byte> out) { kernel(h, lookup, out); });
  }

 private:
  Region source_region(const Coord& h) const {
    Region r = chunk_logical_region(metadata(), h);
    const TensorMetaData& imd = in_->metadata();
    for (std::size_t i = 0; i < r.begin.size(); ++i) {
      if (!dims_[i]) continue;
      r.begin[i] *= 2;
      r.end[i] = std::min(imd.size[i], r.end[i] * 2);
    }
    return r;
  }

  void kernel(const Coord& h, const detail::ChunkLookup& lookup, std::span<std::byte> out) const {
    const TensorMetaData& md = metadata();
    const TensorMetaData& imd = in_->metadata();
    const Region src = source_region(h);
    const Region dst = chunk_logical_region(md, h);
    const Coord sshape = detail::shape_of(src);
    const Coord dshape = detail::shape_of(dst);
    std::uint64_t n = 1;
    for (auto s : sshape) n *= s;
    std::vector<std::byte> dense(n * imd.dtype.size());
    gather_region(imd, src, lookup, dense);
    const std::vector<double> v = to_doubles(dense, imd.dtype);
    const std::size_t d = md.num_dims();
    const std::size_t lanes = md.dtype.lanes;
    const Coord sstr = row_major_strides(sshape);
    std::uint64_t m = 1;
    for (auto s : dshape) m *= s;
    std::vector<double> res(m * lanes);
    Coord o(d, 0);
    for (std::uint64_t e = 0; e < m; ++e) {
      // Block of source elements (local to src) for output element o.
      Coord lo(d), hi(d);
      for (std::size_t i = 0; i < d; ++i) {
        lo[i] = dims_[i] ? 2 * o[i] : o[i];
        hi[i] = dims_[i] ? std::min(sshape[i], lo[i] + 2) : lo[i] + 1;
      }
      for (std::size_t l = 0; l < lanes; ++l) {
        // Mean taken relative to the first element so uniform blocks reproduce their value.
        double first = 0, acc = 0;
        std::uint64_t count = 0;
        Coord c = lo;
        for (;;) {
          std::uint64_t off = 0;
          for (std::size_t i = 0; i < d; ++i) off += c[i] * sstr[i];
          const double x = v[off * lanes + l];
          if (count == 0) first = x;
          acc += x - first;
          ++count;
          std::size_t i = d;
          while (i-- > 0) {
            if (++c[i] < hi[i]) break;
            c[i] = lo[i];
          }
          if (i == static_cast<std::size_t>(-1)) break;
        }
        res[e * lanes + l] = first + acc / static_cast<double>(count);
      }
      std::size_t i = d;
      while (i-- > 0) {
        if (++o[i] < dshape[i]) break;
        o[i] = 0;
      }
    }
    std::vector<std::byte> bytes(m * md.dtype.size());
    from_doubles(res, md.dtype, bytes);
    std::memset(out.data(), 0, out.size());
    copy_box(bytes.data(), dshape, Coord(d, 0), out.data(), md.chunk_size, Coord(d, 0), dshape,
             md.dtype.size());
  }

  OperatorPtr in_;
  std::vector<bool> dims_;
};

}  // namespace

OperatorPtr slice(const OperatorPtr& in, std::size_t dim, std::uint64_t index) {
  if (!in) throw InvalidArgument("slice input is null");
  const TensorMetaData& md = in->metadata();
  if (md.num_dims() < 2) throw InvalidArgument("cannot slice a 1-D tensor");
  if (dim >= md.num_dims()) throw InvalidArgument("slice dimension " + std::to_string(dim) + " out of range");
  if (index >= md.size[dim])
    throw InvalidCoordinate("slice index " + std::to_string(index) + " out of range [0, " +
                            std::to_string(md.size[dim]) + ")");
  return std::make_shared<Slice>(in, dim, index);
}

OperatorPtr downsample_mean(const OperatorPtr& in, std::vector<bool> dims) {
  if (!in) throw InvalidArgument("downsample input is null");
  if (dims.size() != in->metadata().num_dims())
    throw InvalidArgument("downsample dimension mask has the wrong length");
  return std::make_shared<DownsampleMean>(in, std::move(dims));
}

void LodPyramid::validate() const {
  if (levels.empty()) throw InvalidArgument("LOD pyramid without levels");
  const auto& base = levels.front();
  const auto phys0 = base->embedding().physical_size(base->metadata());
  for (std::size_t k = 1; k < levels.size(); ++k) {
    const auto& prev = levels[k - 1];
    const auto& cur = levels[k];
    if (cur->metadata().num_dims() != base->metadata().num_dims())
      throw InvalidArgument("LOD levels differ in dimensionality");
    const auto phys = cur->embedding().physical_size(cur->metadata());
    for (std::size_t i = 0; i < phys.size(); ++i) {
      if (cur->metadata().size[i] > prev->metadata().size[i])
        throw InvalidArgument("LOD level " + std::to_string(k) + " grows along dimension " + std::to_string(i));
      if (cur->embedding().spacing[i] < prev->embedding().spacing[i])
        throw InvalidArgument("LOD level " + std::to_string(k) + " has finer spacing than level " +
                              std::to_string(k - 1));
      if (std::fabs(phys[i] - phys0[i]) > cur->embedding().spacing[i])
        throw InvalidArgument("LOD level " + std::to_string(k) + " changes the physical size along dimension " +
                              std::to_string(i));
    }
  }
}

OperatorPtr lod_next_level(const OperatorPtr& in) {
  if (!in) throw InvalidArgument("LOD input is null");
  const TensorMetaData& md = in->metadata();
  std::vector<bool> dims(md.num_dims());
  bool any = false;
  SeparableKernel k;
  for (std::size_t i = 0; i < md.num_dims(); ++i) {
    dims[i] = md.size[i] > md.chunk_size[i];
    any |= dims[i];
    k.per_dim.push_back(dims[i] ? std::vector<double>{0.25, 0.5, 0.25} : std::vector<double>{1.0});
  }
  if (!any) return nullptr;
  return downsample_mean(separable_conv(in, std::move(k)), dims);
}

LodPyramid build_lod(const OperatorPtr& in) {
  if (!in) throw InvalidArgument("LOD input is null");
  LodPyramid p;
  p.levels.push_back(in);
  while (auto next = lod_next_level(p.levels.back())) p.levels.push_back(std::move(next));
  return p;
}

LodPyramid single_level_lod(const OperatorPtr& in) {
  if (!in) throw InvalidArgument("LOD input is null");
  LodPyramid p;
  p.levels.push_back(in);
  return p;
}

}  // namespace chunkflow
