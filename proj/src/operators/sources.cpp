// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>

#include "common.hpp"

namespace chunkflow {

namespace {

class ArraySource : public OperatorBase<ArraySource> {
 public:
  ArraySource(std::shared_ptr<const std::vector<std::byte>> data, TensorMetaData md, EmbeddingData emb)
      : OperatorBase("array", ParamWriter().id(content_digest(*data)).data(), {}, md, emb),
        data_(std::move(data)) {}

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    for (const auto& h : positions) {
      Allocation out = co_await ctx.allocate_output();
      auto bytes = out.bytes();
      co_await ctx.run([this, &h, bytes] {
        const TensorMetaData& md = metadata();
        std::memset(bytes.data(), 0, bytes.size());
        const Region r = chunk_logical_region(md, h);
        copy_box(data_->data(), md.size, r.begin, bytes.data(), md.chunk_size,
                 Coord(md.num_dims(), 0), detail::shape_of(r), md.dtype.size());
      });
      ctx.commit(h, std::move(out));
    }
  }

 private:
  std::shared_ptr<const std::vector<std::byte>> data_;
};

class ProceduralSource : public OperatorBase<ProceduralSource> {
 public:
  ProceduralSource(std::string name, const std::vector<std::byte>& params, Generator gen,
                   std::optional<double> uniform, TensorMetaData md, EmbeddingData emb)
      : OperatorBase("procedural", ParamWriter().str(name).bytes(params).data(), {}, md, emb),
        gen_(std::move(gen)),
        uniform_(uniform) {}

  std::optional<double> known_uniform() const override {
    if (!uniform_) return std::nullopt;
    return round_to(metadata().dtype.kind, *uniform_);
  }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    std::vector<std::function<void()>> jobs;
    std::vector<Allocation> outs;
    outs.reserve(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) outs.push_back(co_await ctx.allocate_output());
    for (std::size_t i = 0; i < positions.size(); ++i) {
      auto bytes = outs[i].bytes();
      const Coord& h = positions[i];
      jobs.push_back([this, &h, bytes] { fill(h, bytes); });
    }
    co_await ctx.run_all(std::move(jobs));
    for (std::size_t i = 0; i < positions.size(); ++i) ctx.commit(positions[i], std::move(outs[i]));
  }

 private:
  void fill(const Coord& h, std::span<std::byte> out) const {
    const TensorMetaData& md = metadata();
    if (const auto u = known_uniform()) {
      detail::fill_uniform(md, h, *u, out);
      return;
    }
    std::memset(out.data(), 0, out.size());
    const Region r = chunk_logical_region(md, h);
    const std::size_t d = md.num_dims();
    const Coord strides = row_major_strides(md.chunk_size);
    const std::size_t ss = scalar_size(md.dtype.kind);
    Coord g = r.begin;
    for (;;) {
      const double v = gen_(g);
      std::uint64_t off = 0;
      for (std::size_t i = 0; i < d; ++i) off += (g[i] - r.begin[i]) * strides[i];
      std::byte* p = out.data() + off * md.dtype.size();
      for (std::size_t l = 0; l < md.dtype.lanes; ++l) store_scalar(p + l * ss, md.dtype.kind, v);
      std::size_t i = d;
      while (i-- > 0) {
        if (++g[i] < r.end[i]) break;
        g[i] = r.begin[i];
      }
      if (i == static_cast<std::size_t>(-1)) break;
    }
  }

  Generator gen_;
  std::optional<double> uniform_;
};

}  // namespace

OperatorPtr source_from_array(std::vector<std::byte> data, TensorMetaData md, EmbeddingData embedding) {
  md.validate();
  std::uint64_t n = md.dtype.size();
  for (auto s : md.size) n *= s;
  if (data.size() != n)
    throw ShapeMismatch("array of " + std::to_string(data.size()) + " bytes for a tensor of " +
                        std::to_string(n) + " bytes");
  return std::make_shared<ArraySource>(std::make_shared<const std::vector<std::byte>>(std::move(data)),
                                       std::move(md), std::move(embedding));
}

OperatorPtr source_procedural(std::string name, std::vector<std::byte> params, Generator gen,
                              TensorMetaData md, EmbeddingData embedding) {
  if (!gen) throw InvalidArgument("procedural source without a generator");
  return std::make_shared<ProceduralSource>(std::move(name), params, std::move(gen), std::nullopt,
                                            std::move(md), std::move(embedding));
}

OperatorPtr constant_source(double value, TensorMetaData md, EmbeddingData embedding) {
  return std::make_shared<ProceduralSource>(
      "constant", ParamWriter().f64(value).data(), [value](std::span<const std::uint64_t>) { return value; },
      value, std::move(md), std::move(embedding));
}

double mandelbulb_value(double cx, double cy, double cz) {
  constexpr int kMaxIter = 8;
  constexpr double kPower = 8.0;
  double x = 0, y = 0, z = 0;
  for (int n = 0; n < kMaxIter; ++n) {
    const double r = std::sqrt(x * x + y * y + z * z);
    if (r > 0) {
      const double theta = std::acos(z / r) * kPower;
      const double phi = std::atan2(y, x) * kPower;
      const double rp = std::pow(r, kPower);
      x = rp * std::sin(theta) * std::cos(phi) + cx;
      y = rp * std::sin(theta) * std::sin(phi) + cy;
      z = rp * std::cos(theta) + cz;
    } else {
      x = cx;
      y = cy;
      z = cz;
    }
    const double m = std::sqrt(x * x + y * y + z * z);
    if (m > 2.0) {
      const double mu = n + 1 - std::log(std::log(m) / std::log(2.0)) / std::log(kPower);
      return std::clamp(mu / kMaxIter, 0.0, 1.0);
    }
  }
  return 1.0;
}

OperatorPtr mandelbulb_source(TensorMetaData md, EmbeddingData embedding) {
  if (md.num_dims() != 3) throw InvalidArgument("the mandelbulb source is 3-D");
  const Coord size = md.size;
  auto gen = [size](std::span<const std::uint64_t> g) {
    auto at = [&](std::size_t dim) {
      return -1.2 + 2.4 * (static_cast<double>(g[dim]) + 0.5) / static_cast<double>(size[dim]);
    };
    return mandelbulb_value(at(2), at(1), at(0));
  };
  return source_procedural("mandelbulb", {}, gen, std::move(md), std::move(embedding));
}

}  // namespace chunkflow
