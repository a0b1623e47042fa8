// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <optional>
#include <set>

#include "chunkflow/render.hpp"

namespace chunkflow {

namespace {

class ImageView : public OperatorBase<ImageView> {
 public:
  ImageView(OperatorPtr level, std::vector<double> scale, PanZoom view, const TensorMetaData& frame)
      : OperatorBase("image_view", encode(scale, view, frame), {level},
                     TensorMetaData(frame.size, frame.chunk_size, level->metadata().dtype), EmbeddingData::unit(2)),
        level_(std::move(level)),
        scale_(std::move(scale)),
        view_(view) {}

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const TensorMetaData& lmd = level_->metadata();
    for (const auto& h : positions) {
      const Region r = chunk_logical_region(metadata(), h);
      std::set<Coord> needed;
      for (std::uint64_t y = r.begin[0]; y < r.end[0]; ++y) {
        const auto iy = source_index(0, y, view_.pan_y);
        if (!iy) continue;
        for (std::uint64_t x = r.begin[1]; x < r.end[1]; ++x) {
          const auto ix = source_index(1, x, view_.pan_x);
          if (ix) needed.insert(Coord{*iy / lmd.chunk_size[0], *ix / lmd.chunk_size[1]});
        }
      }
      std::vector<Coord> pos(needed.begin(), needed.end());
      std::vector<ChunkRef> refs;
      if (!pos.empty()) refs = co_await ctx.request(level_, pos);
      Allocation out = co_await ctx.allocate_output();
      auto bytes = out.bytes();
      co_await ctx.run([this, &h, &pos, &refs, bytes] { fill(h, pos, refs, bytes); });
      ctx.commit(h, std::move(out));
    }
  }

 private:
  static std::vector<std::byte> encode(const std::vector<double>& scale, const PanZoom& v, const TensorMetaData& f) {
    ParamWriter w;
    w.reals(scale).f64(v.zoom).f64(v.pan_x).f64(v.pan_y).coord(f.size).coord(f.chunk_size);
    return std::move(w).take();
  }

  // Level element along `dim` shown by frame pixel `p`, or nothing outside the tensor.
  std::optional<std::uint64_t> source_index(std::size_t dim, std::uint64_t p, double pan) const {
    const double c = (pan + (static_cast<double>(p) + 0.5) / view_.zoom) * scale_[dim];
    if (!(c >= 0)) return std::nullopt;
    const double f = std::floor(c);
    if (f >= static_cast<double>(level_->metadata().size[dim])) return std::nullopt;
    return static_cast<std::uint64_t>(f);
  }

  void fill(const Coord& h, const std::vector<Coord>& pos, const std::vector<ChunkRef>& refs,
            std::span<std::byte> out) const {
    std::memset(out.data(), 0, out.size());
    const TensorMetaData& md = metadata();
    const TensorMetaData& lmd = level_->metadata();
    const std::size_t es = md.dtype.size();
    const Region r = chunk_logical_region(md, h);
    for (std::uint64_t y = r.begin[0]; y < r.end[0]; ++y) {
      const auto iy = source_index(0, y, view_.pan_y);
      if (!iy) continue;
      for (std::uint64_t x = r.begin[1]; x < r.end[1]; ++x) {
        const auto ix = source_index(1, x, view_.pan_x);
        if (!ix) continue;
        const Coord c{*iy / lmd.chunk_size[0], *ix / lmd.chunk_size[1]};
        const auto it = std::lower_bound(pos.begin(), pos.end(), c);
        const std::byte* src = refs[static_cast<std::size_t>(it - pos.begin())].bytes().data();
        const std::uint64_t off = (*iy % lmd.chunk_size[0]) * lmd.chunk_size[1] + (*ix % lmd.chunk_size[1]);
        std::memcpy(out.data() + ((y - r.begin[0]) * md.chunk_size[1] + (x - r.begin[1])) * es, src + off * es, es);
      }
    }
  }

  OperatorPtr level_;
  std::vector<double> scale_;  // level-0 element -> level element, per dimension
  PanZoom view_;
};

}  // namespace

OperatorPtr image_view(const LodPyramid& pyramid, PanZoom view, const TensorMetaData& frame_md) {
  if (pyramid.size() == 0) throw InvalidArgument("image view needs a non-empty pyramid");
  for (const auto& l : pyramid.levels)
    if (l->metadata().num_dims() != 2) throw InvalidArgument("image view needs 2-D levels");
  if (frame_md.num_dims() != 2) throw InvalidArgument("frame metadata must be 2-D");
  frame_md.validate();
  if (!std::isfinite(view.pan_x) || !std::isfinite(view.pan_y)) throw InvalidArgument("pan must be finite");
  const std::size_t l = view_level(pyramid.size(), view.zoom);
  const auto& s0 = pyramid[0]->embedding().spacing;
  const auto& sl = pyramid[l]->embedding().spacing;
  return std::make_shared<ImageView>(pyramid[l], std::vector<double>{s0[0] / sl[0], s0[1] / sl[1]}, view, frame_md);
}

LodPyramid slice_pyramid(const LodPyramid& pyramid, std::size_t dim, std::uint64_t index) {
  if (pyramid.size() == 0) throw InvalidArgument("slice of an empty pyramid");
  const TensorMetaData& md0 = pyramid[0]->metadata();
  if (dim >= md0.num_dims()) throw InvalidArgument("slice dimension out of range");
  if (index >= md0.size[dim]) throw InvalidCoordinate("slice index out of range");
  const double s0 = pyramid[0]->embedding().spacing[dim];
  LodPyramid out;
  for (const auto& l : pyramid.levels) {
    const double p = (static_cast<double>(index) + 0.5) * s0 / l->embedding().spacing[dim];
    const std::uint64_t i = std::min(l->metadata().size[dim] - 1, static_cast<std::uint64_t>(std::floor(p)));
    out.levels.push_back(slice(l, dim, i));
  }
  return out;
}

OperatorPtr slice_view(const LodPyramid& pyramid, std::size_t dim, std::uint64_t index, PanZoom view,
                       const TensorMetaData& frame_md) {
  if (pyramid.size() == 0 || pyramid[0]->metadata().num_dims() != 3)
    throw InvalidArgument("slice view needs a 3-D pyramid");
  return image_view(slice_pyramid(pyramid, dim, index), view, frame_md);
}

}  // namespace chunkflow
