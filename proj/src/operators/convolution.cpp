// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>

#include "common.hpp"

namespace chunkflow {

SeparableKernel SeparableKernel::uniform(std::size_t dims, std::vector<double> k) {
  SeparableKernel s;
  s.per_dim.assign(dims, std::move(k));
  return s;
}

void SeparableKernel::validate(const TensorMetaData& md) const {
  if (per_dim.size() != md.num_dims())
    throw InvalidArgument("kernel has " + std::to_string(per_dim.size()) + " dimensions, tensor has " +
                          std::to_string(md.num_dims()));
  for (std::size_t i = 0; i < per_dim.size(); ++i) {
    const auto& k = per_dim[i];
    if (k.empty() || k.size() % 2 == 0)
      throw InvalidArgument("kernel length along dimension " + std::to_string(i) + " must be odd");
    if (k.size() > 2 * md.size[i] + 1)
      throw InvalidArgument("kernel of length " + std::to_string(k.size()) + " is longer than 2*" +
                            std::to_string(md.size[i]) + "+1 along dimension " + std::to_string(i));
    for (double w : k)
      if (!std::isfinite(w)) throw InvalidArgument("kernel coefficients must be finite");
  }
}

namespace {

Region dilated_region(const TensorMetaData& md, const SeparableKernel& k, const Coord& h) {
  Region r = chunk_logical_region(md, h);
  for (std::size_t i = 0; i < md.num_dims(); ++i) {
    const std::uint64_t rad = k.per_dim[i].size() / 2;
    r.begin[i] = r.begin[i] > rad ? r.begin[i] - rad : 0;
    r.end[i] = std::min(md.size[i], r.end[i] + rad);
  }
  return r;
}

// One pass along `dim`: src covers `src_box` (absolute coordinates), the result covers the same
// box except along dim, where it covers [out_lo, out_hi).
std::vector<double> convolve_dim(const std::vector<double>& src, const Region& src_box, std::size_t dim,
                                 std::uint64_t out_lo, std::uint64_t out_hi, const std::vector<double>& k,
                                 std::uint64_t size, std::size_t lanes) {
  const std::size_t d = src_box.begin.size();
  Coord shape = detail::shape_of(src_box);
  Coord out_shape = shape;
  out_shape[dim] = out_hi - out_lo;
  std::uint64_t outer = 1, inner = lanes;
  for (std::size_t i = 0; i < dim; ++i) outer *= shape[i];
  for (std::size_t i = dim + 1; i < d; ++i) inner *= shape[i];
  const std::uint64_t n_src = shape[dim], n_out = out_shape[dim];
  const auto rad = static_cast<std::int64_t>(k.size() / 2);
  std::vector<double> out(outer * n_out * inner);
  for (std::uint64_t o = 0; o < outer; ++o) {
    for (std::uint64_t x = 0; x < n_out; ++x) {
      const auto gx = static_cast<std::int64_t>(out_lo + x);
      double* dst = out.data() + (o * n_out + x) * inner;
      for (std::size_t j = 0; j < k.size(); ++j) {
        auto g = gx + rad - static_cast<std::int64_t>(j);
        g = std::clamp<std::int64_t>(g, 0, static_cast<std::int64_t>(size) - 1);
        const std::uint64_t local = static_cast<std::uint64_t>(g) - src_box.begin[dim];
        const double w = k[j];
        const double* s = src.data() + (o * n_src + local) * inner;
        for (std::uint64_t q = 0; q < inner; ++q) dst[q] += w * s[q];
      }
    }
  }
  return out;
}

class SeparableConv : public OperatorBase<SeparableConv> {
 public:
  SeparableConv(OperatorPtr in, SeparableKernel k)
      : OperatorBase("separable_conv", encode(k), {in}, in->metadata(), in->embedding()),
        in_(std::move(in)),
        k_(std::move(k)) {}

  std::optional<double> known_uniform() const override {
    auto u = in_->known_uniform();
    if (!u) return std::nullopt;
    double v = *u;
    for (const auto& k : k_.per_dim) {
      double acc = 0;
      for (double w : k) acc += w * v;
      v = acc;
    }
    return round_to(metadata().dtype.kind, v);
  }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const TensorMetaData& md = metadata();
    co_await detail::per_chunk(
        ctx, *this, in_, std::move(positions),
        [this, &md](const Coord& h) { return conv_dependencies(md, k_, h); },
        [this, &md](const Coord& h, const detail::ChunkLookup& lookup, std::span<std::byte> out) {
          const Region src = dilated_region(md, k_, h);
          const Region dst = chunk_logical_region(md, h);
          std::uint64_t n = 1;
          for (auto s : detail::shape_of(src)) n *= s;
          std::vector<std::byte> dense(n * md.dtype.size());
          gather_region(md, src, lookup, dense);
          std::vector<double> v = to_doubles(dense, md.dtype);
          Region box = src;
          for (std::size_t i = 0; i < md.num_dims(); ++i) {
            v = convolve_dim(v, box, i, dst.begin[i], dst.end[i], k_.per_dim[i], md.size[i], md.dtype.lanes);
            box.begin[i] = dst.begin[i];
            box.end[i] = dst.end[i];
          }
          std::vector<std::byte> result(v.size() * scalar_size(md.dtype.kind));
          from_doubles(v, md.dtype, result);
          std::memset(out.data(), 0, out.size());
          const Coord shape = detail::shape_of(dst);
          copy_box(result.data(), shape, Coord(shape.size(), 0), out.data(), md.chunk_size,
                   Coord(shape.size(), 0), shape, md.dtype.size());
        });
  }

 private:
  static std::vector<std::byte> encode(const SeparableKernel& k) {
    ParamWriter w;
    w.u64(k.per_dim.size());
    for (const auto& d : k.per_dim) w.reals(d);
    return std::move(w).take();
  }

  OperatorPtr in_;
  SeparableKernel k_;
};

}  // namespace

std::vector<Coord> conv_dependencies(const TensorMetaData& md, const SeparableKernel& k, const Coord& h) {
  return chunks_overlapping(md, dilated_region(md, k, h));
}

OperatorPtr separable_conv(const OperatorPtr& in, SeparableKernel kernel) {
  if (!in) throw InvalidArgument("convolution input is null");
  kernel.validate(in->metadata());
  return std::make_shared<SeparableConv>(in, std::move(kernel));
}

}  // namespace chunkflow
