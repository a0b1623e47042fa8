// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <map>

#include "chunkflow/page_table.hpp"
#include "chunkflow/render.hpp"

namespace chunkflow {

namespace {

constexpr std::size_t kRowBands = 16;
constexpr std::size_t kMaxResumeKeys = 4096;

struct LevelInfo {
  double spacing[3];
  std::uint64_t size[3];
  std::uint64_t chunk[3];
  std::uint64_t grid[3];
  double min_spacing;
  ScalarKind kind;
  std::uint64_t tchunk[3];  // const table of the level
  std::uint64_t tgrid[3];
  ScalarKind tkind;
  double alpha_exponent;  // sample distance over the level-0 sample distance
};

struct Ray {
  Eigen::Vector3d origin{0, 0, 0};  // world
  Eigen::Vector3d dir{0, 0, 0};
  double length = 0;
  double f0 = 0;
  double k = 0;
  double s = 0;
  double acc[4] = {0, 0, 0, 0};
  bool active = false;
};

struct TileResume {
  std::vector<UseKey> query;
};

class Raycast : public OperatorBase<Raycast> {
 public:
  Raycast(LodPyramid lod, OperatorPtr eep, RaycasterConfig cfg, TransferFunction tf)
      : OperatorBase("raycast", encode(cfg, tf), collect_inputs(lod, eep, cfg), frame_md(eep->metadata()),
                     EmbeddingData::unit(2)),
        lod_(std::move(lod)),
        eep_(std::move(eep)),
        cfg_(cfg),
        tf_(tf) {
    extent_ = volume_extent(lod_[0]->metadata(), lod_[0]->embedding());
    for (std::size_t l = 0; l < lod_.size(); ++l) {
      const TensorMetaData& md = lod_[l]->metadata();
      LevelInfo li{};
      for (int d = 0; d < 3; ++d) {
        li.spacing[d] = lod_[l]->embedding().spacing[d];
        li.size[d] = md.size[d];
        li.chunk[d] = md.chunk_size[d];
        li.grid[d] = md.chunk_grid()[d];
      }
      li.min_spacing = lod_[l]->embedding().min_spacing();
      li.kind = md.dtype.kind;
      if (cfg_.use_const_table) {
        const TensorMetaData& tmd = lod_.const_tables[l]->metadata();
        for (int d = 0; d < 3; ++d) {
          li.tchunk[d] = tmd.chunk_size[d];
          li.tgrid[d] = tmd.chunk_grid()[d];
        }
        li.tkind = tmd.dtype.kind;
      }
      levels_.push_back(li);
      max_brick_bytes_ = std::max(max_brick_bytes_, md.chunk_bytes());
    }
    ds0_ = cfg_.sample_distance_factor * levels_[0].min_spacing;
    bias_scale_ = std::exp2(cfg_.lod_bias);
    for (auto& li : levels_) li.alpha_exponent = cfg_.sample_distance_factor * li.min_spacing / ds0_;
  }

  std::size_t max_batch() const override { return 1; }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const std::size_t n = levels_.size();
    const bool preview = ctx.wanted_state() == ChunkState::Preview;
    ParamWriter dk;
    dk.str("raycast.bricks").u8(cfg_.use_const_table ? 1 : 0);
    for (const auto& l : lod_.levels) dk.id(l->id().value);
    if (cfg_.use_const_table)
      for (const auto& t : lod_.const_tables) dk.id(t->id().value);
    auto dir = ctx.state<BrickDirectory>(content_digest(dk.data()), [&] {
      auto d = std::make_shared<BrickDirectory>(cfg_.use_const_table ? 2 * n : n);
      ctx.register_reclaimer(d);
      return d;
    });
    const std::uint64_t cap = ctx.store_capacity(ctx.location());
    const std::size_t budget = std::max<std::size_t>(
        1, std::min<std::uint64_t>(ctx.config().max_requests_per_task,
                                   cap / (max_brick_bytes_ * 2 * ctx.config().max_active_tasks_per_operator)));

    for (const auto& h : positions) {
      ParamWriter rk;
      rk.str("raycast.resume").id(id().value).coord(h).u8(preview ? 1 : 0);
      auto resume = ctx.state<TileResume>(content_digest(rk.data()), [] { return std::make_shared<TileResume>(); });

      std::vector<Ray> rays;
      {
        std::vector<ChunkRef> e = co_await ctx.request(eep_, {Coord{h[0], h[1], 0}});
        rays = init_rays(h, e[0].bytes());
      }
      RequestTable requests;
      RequestTable uses;
      std::vector<UseKey> query = resume->query;
      std::vector<UseKey> asked;
      for (;;) {
        if (!query.empty()) {
          std::map<std::uint8_t, std::vector<std::uint64_t>> groups;
          std::size_t count = 0;
          for (const UseKey& k : query) {
            if (count == budget) break;
            if (k.level >= dir->levels() || dir->mapped(k.level, k.index)) continue;
            groups[k.level].push_back(k.index);
            ++count;
          }
          std::vector<std::pair<UseKey, ChunkRef>> loaded;
          for (auto& [level, idx] : groups) {
            const bool table = level >= n;
            const OperatorPtr& op = table ? lod_.const_tables[level - n] : lod_[level];
            const Coord grid = op->metadata().chunk_grid();
            std::vector<Coord> pos;
            for (auto i : idx) pos.push_back(delinearize(grid, i));
            std::vector<ChunkRef> refs = co_await ctx.request(op, pos);
            for (std::size_t i = 0; i < refs.size(); ++i)
              loaded.emplace_back(UseKey{idx[i], level, false}, std::move(refs[i]));
          }
          for (auto& [k, ref] : loaded) {
            try {
              dir->map(k.level, k.index, std::move(ref), true);
            } catch (const ReclamationNeeded&) {
            }
          }
          for (const UseKey& k : query)
            if (k.level < dir->levels()) dir->pin(k.level, k.index);
        }

        std::vector<std::function<void()>> jobs;
        const std::size_t rows = rows_of(h);
        const std::size_t band = std::max<std::size_t>(1, (rows + kRowBands - 1) / kRowBands);
        const std::size_t width = rays.size() / std::max<std::size_t>(rows, 1);
        for (std::size_t r0 = 0; r0 < rows; r0 += band) {
          const std::size_t r1 = std::min(rows, r0 + band);
          jobs.push_back([this, &rays, &requests, &uses, d = dir.get(), preview, a = r0 * width, b = r1 * width] {
            for (std::size_t i = a; i < b; ++i)
              if (rays[i].active) march(rays[i], *d, preview, requests, uses);
          });
        }
        dir->begin_pass();
        std::exception_ptr err;
        try {
          co_await ctx.run_all(std::move(jobs));
        } catch (...) {
          err = std::current_exception();
        }
        dir->end_pass();
        if (err) std::rethrow_exception(err);
        dir->touch(uses.drain());
        query = requests.drain();
        if (query.empty()) break;
        asked.insert(asked.end(), query.begin(), query.end());
      }
      std::sort(asked.begin(), asked.end());
      asked.erase(std::unique(asked.begin(), asked.end()), asked.end());
      if (asked.size() > kMaxResumeKeys) asked.resize(kMaxResumeKeys);
      if (!asked.empty()) resume->query = std::move(asked);

      Allocation out = co_await ctx.allocate_output();
      auto bytes = out.bytes();
      co_await ctx.run([this, &h, &rays, bytes] { write_tile(h, rays, bytes); });
      ctx.commit(h, std::move(out), preview ? ChunkState::Preview : ChunkState::Final);
    }
  }

 private:
  static std::vector<std::byte> encode(const RaycasterConfig& c, const TransferFunction& tf) {
    ParamWriter w;
    w.u8(static_cast<std::uint8_t>(c.compositing))
        .f64(c.sample_distance_factor)
        .f64(c.lod_bias)
        .i64(c.preview_lod_offset)
        .u8(c.use_const_table ? 1 : 0)
        .str("grey_ramp")
        .f64(tf.min)
        .f64(tf.max);
    return std::move(w).take();
  }

  static std::vector<OperatorPtr> collect_inputs(const LodPyramid& lod, const OperatorPtr& eep,
                                                 const RaycasterConfig& c) {
    std::vector<OperatorPtr> in{eep};
    in.insert(in.end(), lod.levels.begin(), lod.levels.end());
    if (c.use_const_table) in.insert(in.end(), lod.const_tables.begin(), lod.const_tables.end());
    return in;
  }

  static TensorMetaData frame_md(const TensorMetaData& eep) {
    return TensorMetaData({eep.size[0], eep.size[1]}, {eep.chunk_size[0], eep.chunk_size[1]}, DataType::f32(4));
  }

  std::size_t rows_of(const Coord& h) const {
    const Region r = chunk_logical_region(metadata(), h);
    return r.end[0] - r.begin[0];
  }

  std::vector<Ray> init_rays(const Coord& h, std::span<const std::byte> eep) const {
    const TensorMetaData& md = metadata();
    const Region r = chunk_logical_region(md, h);
    const std::uint64_t tw = eep_->metadata().chunk_size[1];
    const float* f = reinterpret_cast<const float*>(eep.data());
    std::vector<Ray> rays;
    rays.reserve((r.end[0] - r.begin[0]) * (r.end[1] - r.begin[1]));
    for (std::uint64_t y = 0; y < r.end[0] - r.begin[0]; ++y) {
      for (std::uint64_t x = 0; x < r.end[1] - r.begin[1]; ++x) {
        const float* e = f + ((y * tw + x) * 2) * 4;
        Ray ray;
        if (e[3] >= 0) {
          const Eigen::Vector3d a = Eigen::Vector3d(e[0], e[1], e[2]).cwiseProduct(extent_);
          const Eigen::Vector3d b = Eigen::Vector3d(e[4], e[5], e[6]).cwiseProduct(extent_);
          ray.length = (b - a).norm();
          if (ray.length > 0) {
            ray.origin = a;
            ray.dir = (b - a) / ray.length;
            ray.f0 = e[3];
            ray.k = e[7];
            ray.active = true;
          }
        }
        rays.push_back(ray);
      }
    }
    return rays;
  }

  std::size_t level_at(double footprint, bool preview) const {
    const double limit = footprint * bias_scale_;
    std::size_t level = 0;
    for (std::size_t l = 1; l < levels_.size(); ++l)
      if (levels_[l].min_spacing <= limit) level = l;
    if (preview) level = std::min(levels_.size() - 1, level + static_cast<std::size_t>(cfg_.preview_lod_offset));
    return level;
  }

  // Marches until the ray ends or needs a chunk that is not mapped (noted in `requests`).
  void march(Ray& r, const BrickDirectory& dir, bool preview, RequestTable& requests, RequestTable& uses) const {
    const std::size_t n = levels_.size();
    std::size_t cached_level = SIZE_MAX;
    std::uint64_t cached_brick = 0;
    bool cached_uniform = false;
    double uniform_value = 0;
    std::span<const std::byte> brick;
    while (r.s < r.length) {
      const std::size_t L = level_at(r.f0 + r.k * r.s, preview);
      const LevelInfo& li = levels_[L];
      const double ds = cfg_.sample_distance_factor * li.min_spacing;
      const Eigen::Vector3d w = r.origin + r.dir * r.s;
      std::uint64_t idx[3], hb[3];
      for (int d = 0; d < 3; ++d) {
        const double g = std::floor(w[2 - d] / li.spacing[d]);
        idx[d] = g <= 0 ? 0 : std::min(li.size[d] - 1, static_cast<std::uint64_t>(g));
        hb[d] = idx[d] / li.chunk[d];
      }
      const std::uint64_t lin = (hb[0] * li.grid[1] + hb[1]) * li.grid[2] + hb[2];
      if (L != cached_level || lin != cached_brick) {
        cached_uniform = false;
        brick = {};
        if (cfg_.use_const_table) {
          std::uint64_t th[3], tl[3];
          for (int d = 0; d < 3; ++d) {
            th[d] = hb[d] / li.tchunk[d];
            tl[d] = hb[d] % li.tchunk[d];
          }
          const std::uint64_t tlin = (th[0] * li.tgrid[1] + th[1]) * li.tgrid[2] + th[2];
          const UseKey tkey{tlin, static_cast<std::uint8_t>(n + L), false};
          const auto table = dir.find(n + L, tlin);
          if (table.empty()) {
            requests.note(tkey);
            return;
          }
          uses.note(tkey);
          const std::uint64_t off = (tl[0] * li.tchunk[1] + tl[1]) * li.tchunk[2] + tl[2];
          const double v = load_scalar(table.data() + off * scalar_size(li.tkind), li.tkind);
          if (!is_const_sentinel(v, li.tkind)) {
            cached_uniform = true;
            uniform_value = v;
            if (tf_(v)[3] == 0) {
              // Transparent brick: step over its samples without classifying them.
              const double end = std::min(r.length, brick_exit(r, li, hb) - 1e-9 * li.min_spacing);
              if (r.s < end && L == level_at(r.f0 + r.k * end, preview)) {
                while (r.s < end) r.s += ds;
                cached_level = SIZE_MAX;
                continue;
              }
            }
          }
        }
        if (!cached_uniform) {
          const UseKey key{lin, static_cast<std::uint8_t>(L), false};
          brick = dir.find(L, lin);
          if (brick.empty()) {
            requests.note(key);
            return;
          }
          uses.note(key);
        }
        cached_level = L;
        cached_brick = lin;
      }
      double v = uniform_value;
      if (!cached_uniform) {
        std::uint64_t off = 0;
        for (int d = 0; d < 3; ++d) off = off * li.chunk[d] + (idx[d] - hb[d] * li.chunk[d]);
        v = load_scalar(brick.data() + off * scalar_size(li.kind), li.kind);
      }
      const auto c = tf_(v);
      if (cfg_.compositing == Compositing::DVR) {
        const double a = li.alpha_exponent == 1 ? c[3] : 1 - std::pow(1 - c[3], li.alpha_exponent);
        const double t = (1 - r.acc[3]) * a;
        for (int i = 0; i < 3; ++i) r.acc[i] += t * c[i];
        r.acc[3] += t;
        if (r.acc[3] >= kOpaqueAlpha) {
          r.active = false;
          return;
        }
      } else if (c[3] > r.acc[3]) {
        for (int i = 0; i < 3; ++i) r.acc[i] = c[i] * c[3];
        r.acc[3] = c[3];
      }
      r.s += ds;
    }
    r.active = false;
  }

  // Ray parameter where the ray leaves brick `hb` of a level; edge bricks extend to infinity.
  static double brick_exit(const Ray& r, const LevelInfo& li, const std::uint64_t hb[3]) {
    double t = std::numeric_limits<double>::infinity();
    for (int d = 0; d < 3; ++d) {
      const double dir = r.dir[2 - d];
      const double o = r.origin[2 - d];
      const double w = static_cast<double>(li.chunk[d]) * li.spacing[d];
      if (dir > 0 && hb[d] + 1 < li.grid[d]) t = std::min(t, ((hb[d] + 1) * w - o) / dir);
      if (dir < 0 && hb[d] > 0) t = std::min(t, (hb[d] * w - o) / dir);
    }
    return t;
  }

  void write_tile(const Coord& h, const std::vector<Ray>& rays, std::span<std::byte> out) const {
    std::memset(out.data(), 0, out.size());
    const TensorMetaData& md = metadata();
    const Region r = chunk_logical_region(md, h);
    const std::uint64_t w = r.end[1] - r.begin[1];
    float* f = reinterpret_cast<float*>(out.data());
    for (std::uint64_t y = 0; y < r.end[0] - r.begin[0]; ++y)
      for (std::uint64_t x = 0; x < w; ++x)
        for (int c = 0; c < 4; ++c)
          f[(y * md.chunk_size[1] + x) * 4 + c] = static_cast<float>(rays[y * w + x].acc[c]);
  }

  LodPyramid lod_;
  OperatorPtr eep_;
  RaycasterConfig cfg_;
  TransferFunction tf_;
  Eigen::Vector3d extent_;
  std::vector<LevelInfo> levels_;
  std::uint64_t max_brick_bytes_ = 0;
  double ds0_ = 0;
  double bias_scale_ = 1;
};

}  // namespace

OperatorPtr raycast(const LodPyramid& lod, const OperatorPtr& eep, RaycasterConfig config, TransferFunction tf) {
  if (lod.size() == 0) throw InvalidArgument("raycast needs a non-empty pyramid");
  if (!eep) throw InvalidArgument("raycast needs entry/exit points");
  config.validate();
  tf.validate();
  lod.validate();
  for (const auto& l : lod.levels) {
    if (l->metadata().num_dims() != 3) throw InvalidArgument("raycast needs 3-D levels");
    if (l->metadata().dtype.lanes != 1) throw TypeMismatch("raycast needs scalar volumes");
  }
  const TensorMetaData& e = eep->metadata();
  if (e.num_dims() != 3 || e.size[2] != 2 || e.chunk_size[2] != 2 || e.dtype != DataType::f32(4))
    throw ShapeMismatch("entry/exit tensor must be [H, W, 2] of F32 x 4");
  LodPyramid p = lod;
  if (config.use_const_table) {
    if (p.const_tables.empty())
      for (const auto& l : p.levels) p.const_tables.push_back(const_chunk_table(l));
    if (p.const_tables.size() != p.levels.size())
      throw InvalidArgument("pyramid needs one const table per level");
    for (std::size_t l = 0; l < p.size(); ++l)
      if (p.const_tables[l]->metadata().size != p.levels[l]->metadata().chunk_grid())
        throw ShapeMismatch("const table does not match the chunk grid of level " + std::to_string(l));
  }
  return std::make_shared<Raycast>(std::move(p), eep, config, tf);
}

}  // namespace chunkflow
