// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <set>

#include "chunkflow/page_table.hpp"
#include "chunkflow/render.hpp"
#include "test_support.hpp"

using namespace chunkflow;
using namespace chunkflow::testing;

// ---- Camera ----

TEST(Camera, UnitCubeDistanceAtNinetyDegrees) {
  const TensorMetaData md({1, 1, 1}, {1, 1, 1}, DataType::f32());
  const CameraState c = camera_for_volume(md, EmbeddingData::unit(3), 90);
  EXPECT_NEAR((c.eye - c.look_at).norm(), std::sqrt(3.0) / 2 / std::tan(std::numbers::pi / 4), 1e-12);
  EXPECT_NEAR((c.eye - c.look_at).norm(), 0.8660254, 1e-7);
  EXPECT_TRUE(c.look_at.isApprox(Eigen::Vector3d(0.5, 0.5, 0.5)));
  const Eigen::Vector3d d = (c.eye - c.look_at).normalized();
  EXPECT_NEAR(d.x(), d.y(), 1e-12);
  EXPECT_NEAR(d.y(), d.z(), 1e-12);
  EXPECT_GT(d.x(), 0);
}

TEST(Camera, DoublingSpacingDoublesDistance) {
  const TensorMetaData md({10, 20, 30}, {8, 8, 8}, DataType::f32());
  const CameraState a = camera_for_volume(md, EmbeddingData{{1, 1.5, 2}}, 45);
  const CameraState b = camera_for_volume(md, EmbeddingData{{2, 3, 4}}, 45);
  EXPECT_NEAR((b.eye - b.look_at).norm(), 2 * (a.eye - a.look_at).norm(), 1e-9);
}

TEST(Camera, BoxCentreProjectsToFrameCentre) {
  const TensorMetaData md({10, 20, 30}, {8, 8, 8}, DataType::f32());
  const EmbeddingData emb{{1, 0.5, 2}};
  const CameraState c = camera_for_volume(md, emb, 50);
  const Eigen::Vector4d p = c.projection(1.6) * Eigen::Vector4d(30, 5, 5, 1);
  EXPECT_NEAR(p.x() / p.w(), 0, 1e-12);
  EXPECT_NEAR(p.y() / p.w(), 0, 1e-12);
  EXPECT_GT(p.z() / p.w(), -1);
  EXPECT_LT(p.z() / p.w(), 1);
}

TEST(Camera, RejectsDegenerateParameters) {
  const TensorMetaData md2({4, 4}, {4, 4}, DataType::f32());
  EXPECT_THROW(camera_for_volume(md2, EmbeddingData::unit(2), 60), InvalidArgument);
  CameraState c;
  c.fov_deg = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = CameraState{};
  c.near_plane = 10;
  c.far_plane = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = CameraState{};
  c.up = {0, 0, 3};
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_NO_THROW(CameraState{}.validate());
}

// ---- Entry/exit points ----

TEST(EntryExit, MatchesAnalyticRayBoxOracle) {
  const TensorMetaData md({16, 24, 20}, {8, 8, 8}, DataType::f32());
  const EmbeddingData emb{{1.0, 0.5, 1.25}};
  const CameraState cam = camera_for_volume(md, emb, 60);
  const std::uint64_t W = 33, H = 29;
  const double aspect = static_cast<double>(W) / H;
  const TensorMetaData fmd = frame_metadata(W, H, 16, 8);
  Runtime rt(small_config());
  const auto eep = dense(rt, entry_exit_points(md, emb, fmd, cam.projection(aspect)));
  const Eigen::Vector3d ext(25, 12, 16);
  const Eigen::Matrix4d view = cam.view();
  std::size_t hits = 0, misses = 0;
  for (std::uint64_t r = 0; r < H; ++r) {
    for (std::uint64_t c = 0; c < W; ++c) {
      const double* e = &eep[(r * W + c) * 8];
      const Eigen::Vector3d d = oracle_dir(cam, aspect, W, H, r, c);
      const auto t = oracle_box(cam.eye, d, ext);
      if (!t) {
        ++misses;
        EXPECT_EQ(e[3], -1.0) << r << "," << c;
        continue;
      }
      ++hits;
      ASSERT_GE(e[3], 0.0) << r << "," << c;
      const Eigen::Vector3d entry = cam.eye + d * t->first, exit = cam.eye + d * t->second;
      for (int a = 0; a < 3; ++a) {
        EXPECT_NEAR(e[a], entry[a] / ext[a], 1e-4);
        EXPECT_NEAR(e[4 + a], exit[a] / ext[a], 1e-4);
      }
    }
  }
  EXPECT_GT(hits, 100u);
  EXPECT_GT(misses, 4u);

  // Centre pixel: entry on a front face, exit on a back face, entry nearer along the ray.
  const std::uint64_t r = H / 2, c = W / 2;
  const double* e = &eep[(r * W + c) * 8];
  const double entry_max = std::max({e[0], e[1], e[2]});
  const double exit_min = std::min({e[4], e[5], e[6]});
  EXPECT_NEAR(entry_max, 1.0, 1e-5);
  EXPECT_NEAR(exit_min, 0.0, 1e-5);
  auto depth = [&](const double* p) {
    const Eigen::Vector4d q = view * Eigen::Vector4d(p[0] * ext.x(), p[1] * ext.y(), p[2] * ext.z(), 1);
    return -q.z();
  };
  EXPECT_LT(depth(e), depth(e + 4));
}

TEST(EntryExit, CornerPixelMissesVolume) {
  const TensorMetaData md({32, 32, 32}, {16, 16, 16}, DataType::f32());
  const CameraState cam = camera_for_volume(md, EmbeddingData::unit(3), 60);
  Runtime rt(small_config());
  const auto eep = dense(rt, entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(16, 16, 16, 16),
                                               cam.projection(1.0)));
  for (const std::uint64_t p : {std::uint64_t{0}, std::uint64_t{15}, std::uint64_t{240}, std::uint64_t{255}}) {
    EXPECT_EQ(eep[p * 8 + 3], -1.0);
    for (int i : {0, 1, 2, 4, 5, 6, 7}) EXPECT_EQ(eep[p * 8 + i], 0.0);
  }
}

TEST(EntryExit, EyeInsideVolumeStartsAtNearPlane) {
  const TensorMetaData md({10, 10, 10}, {10, 10, 10}, DataType::f32());
  CameraState cam;
  cam.eye = {5, 5, 5};
  cam.look_at = {5, 5, 0};
  cam.near_plane = 0.25;
  cam.far_plane = 100;
  const std::uint64_t W = 9, H = 7;
  Runtime rt(small_config());
  const auto eep = dense(rt, entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(W, H, 9, 7),
                                               cam.projection(static_cast<double>(W) / H)));
  const Eigen::Matrix4d view = cam.view();
  for (std::uint64_t p = 0; p < W * H; ++p) {
    const double* e = &eep[p * 8];
    ASSERT_GE(e[3], 0.0);
    const Eigen::Vector4d q = view * Eigen::Vector4d(e[0] * 10, e[1] * 10, e[2] * 10, 1);
    EXPECT_NEAR(-q.z(), cam.near_plane, 1e-5);
  }
}

TEST(EntryExit, FootprintGrowsWithDistance) {
  const TensorMetaData md({32, 32, 32}, {16, 16, 16}, DataType::f32());
  const CameraState cam = camera_for_volume(md, EmbeddingData::unit(3), 60);
  const std::uint64_t W = 64;
  Runtime rt(small_config());
  const auto eep = dense(rt, entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(W, W, 32, 32),
                                               cam.projection(1.0)));
  const std::uint64_t p = (W / 2) * W + W / 2;
  const double* e = &eep[p * 8];
  const Eigen::Vector3d entry = Eigen::Vector3d(e[0], e[1], e[2]) * 32;
  const double dist = (entry - cam.eye).norm();
  // Pixel width at distance `dist` along the centre ray (small-angle oracle).
  const double width = 2 * dist * std::tan(std::numbers::pi / 6) / W;
  EXPECT_NEAR(e[3], width, 0.02 * width);
  EXPECT_NEAR(e[7], 2 * std::tan(std::numbers::pi / 6) / W, 0.02 * e[7]);
}

TEST(EntryExit, SingularProjectionRejected) {
  const TensorMetaData md({8, 8, 8}, {8, 8, 8}, DataType::f32());
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m(3, 3) = 0;
  EXPECT_THROW(entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(8, 8, 8, 8), m), InvalidArgument);
  EXPECT_THROW(entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(8, 8, 8, 8), Eigen::Matrix4d::Zero()),
               InvalidArgument);
}

// ---- Transfer function, LOD rules ----

TEST(TransferFunction, GreyRamp) {
  const auto tf = TransferFunction::grey_ramp(0.0, 1.0);
  EXPECT_EQ(tf(0.0), (std::array<double, 4>{0, 0, 0, 0}));
  EXPECT_EQ(tf(1.0), (std::array<double, 4>{1, 1, 1, 1}));
  EXPECT_EQ(tf(0.5), (std::array<double, 4>{0.5, 0.5, 0.5, 0.5}));
  EXPECT_EQ(tf(-3.0)[3], 0.0);
  EXPECT_EQ(tf(7.0)[3], 1.0);
  const auto tf2 = TransferFunction::grey_ramp(10, 20);
  EXPECT_DOUBLE_EQ(tf2(12.5)[0], 0.25);
  EXPECT_THROW(TransferFunction::grey_ramp(1, 1), InvalidArgument);
  EXPECT_THROW(TransferFunction::grey_ramp(2, 1), InvalidArgument);
}

TEST(Lod, SelectionRule) {
  const auto v = volume_from(std::vector<float>(64 * 64 * 64, 0.0f), {64, 64, 64}, {16, 16, 16});
  const LodPyramid lod = build_lod(v);
  ASSERT_EQ(lod.size(), 3u);
  EXPECT_EQ(select_lod(lod, 0.5, 0), 0u);
  EXPECT_EQ(select_lod(lod, 1.99, 0), 0u);
  EXPECT_EQ(select_lod(lod, 2.0, 0), 1u);
  EXPECT_EQ(select_lod(lod, 3.9, 0), 1u);
  EXPECT_EQ(select_lod(lod, 4.0, 0), 2u);
  EXPECT_EQ(select_lod(lod, 1000, 0), 2u);
  EXPECT_EQ(select_lod(lod, 1.0, 1), 1u);
  EXPECT_EQ(select_lod(lod, 2.0, -1), 0u);
}

TEST(Lod, ViewLevelThresholds) {
  EXPECT_EQ(view_level(4, 1.0), 0u);
  EXPECT_EQ(view_level(4, 3.0), 0u);
  EXPECT_EQ(view_level(4, 0.75), 0u);
  EXPECT_EQ(view_level(4, 0.5), 1u);
  EXPECT_EQ(view_level(4, 0.3), 1u);
  EXPECT_EQ(view_level(4, 0.25), 2u);
  EXPECT_EQ(view_level(4, 0.001), 3u);
  EXPECT_THROW(view_level(4, 0.0), InvalidArgument);
  EXPECT_THROW(view_level(0, 1.0), InvalidArgument);
}

TEST(Raycaster, ConfigValidation) {
  RaycasterConfig c;
  EXPECT_NO_THROW(c.validate());
  c.sample_distance_factor = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = RaycasterConfig{};
  c.preview_lod_offset = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  const auto v2 = source_from_array(std::vector<std::byte>(64), TensorMetaData({4, 4}, {4, 4}, DataType::f32()),
                                    EmbeddingData::unit(2));
  const TensorMetaData md({8, 8, 8}, {8, 8, 8}, DataType::f32());
  const CameraState cam = camera_for_volume(md, EmbeddingData::unit(3), 60);
  const auto eep = entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(8, 8, 8, 8), cam.projection(1));
  EXPECT_THROW(raycast(single_level_lod(v2), eep, RaycasterConfig{}, TransferFunction{}), InvalidArgument);
  EXPECT_THROW(raycast(LodPyramid{}, eep, RaycasterConfig{}, TransferFunction{}), InvalidArgument);
}

// ---- Raycasting ----

TEST(Raycast, BallMaximumOpacity) {
  const std::uint64_t n = 32;
  const double radius = 9;
  const auto v = volume_from(ball(n, radius, 0.8f), {n, n, n}, {16, 16, 16});
  RaycasterConfig cfg;
  cfg.compositing = Compositing::MOP;
  cfg.sample_distance_factor = 0.25;
  const std::uint64_t W = 40, H = 40;
  Frame f = make_frame(single_level_lod(v), cfg, TransferFunction::grey_ramp(0, 1), W, H, 20, 20);
  Runtime rt(small_config());
  const auto img = dense(rt, f.image);
  const Eigen::Vector3d centre(n / 2.0, n / 2.0, n / 2.0);
  std::size_t inside = 0, outside = 0;
  for (std::uint64_t r = 0; r < H; ++r) {
    for (std::uint64_t c = 0; c < W; ++c) {
      const Eigen::Vector3d d = oracle_dir(f.camera, 1.0, W, H, r, c);
      // Distance of the ball centre from the ray.
      const double miss = (centre - f.camera.eye - d * d.dot(centre - f.camera.eye)).norm();
      const double* p = &img[(r * W + c) * 4];
      if (miss < radius - 2) {
        ++inside;
        EXPECT_NEAR(p[3], 0.8, 1e-6) << r << "," << c;
        EXPECT_NEAR(p[0], 0.64, 1e-6);
      } else if (miss > radius + 1) {
        ++outside;
        EXPECT_EQ(p[3], 0.0) << r << "," << c;
      }
    }
  }
  EXPECT_GT(inside, 50u);
  EXPECT_GT(outside, 50u);
  EXPECT_NEAR(img[((H / 2) * W + W / 2) * 4 + 3], 0.8, 1e-6);
  EXPECT_EQ(img[3], 0.0);
}

TEST(Raycast, DvrMatchesReferenceOnSingleBrick) {
  const std::uint64_t n = 24;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {n, n, n}, {1.0, 0.75, 1.25});
  const LodPyramid lod = single_level_lod(v);
  RaycasterConfig cfg;
  const auto tf = TransferFunction::grey_ramp(0.2, 4.0);
  const std::uint64_t W = 36, H = 28;
  Frame f = make_frame(lod, cfg, tf, W, H, 16, 16);
  Runtime rt(small_config());
  const auto img = dense(rt, f.image);
  const auto ref = reference_render(dense(rt, f.eep), W, H, dense_levels(rt, lod),
                                    volume_extent(v->metadata(), v->embedding()), cfg, tf);
  double worst = 0, total_alpha = 0;
  for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::fabs(img[i] - ref[i]));
  for (std::size_t i = 3; i < img.size(); i += 4) total_alpha += img[i];
  EXPECT_LE(worst, 1e-5);
  EXPECT_GT(total_alpha, 10.0);
}

TEST(Raycast, MopMatchesReference) {
  const std::uint64_t n = 24;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {8, 8, 8});
  const LodPyramid lod = single_level_lod(v);
  RaycasterConfig cfg;
  cfg.compositing = Compositing::MOP;
  const auto tf = TransferFunction::grey_ramp(0.0, 1.0);
  const std::uint64_t W = 30, H = 30;
  Frame f = make_frame(lod, cfg, tf, W, H, 16, 16);
  Runtime rt(small_config());
  const auto img = dense(rt, f.image);
  const auto ref = reference_render(dense(rt, f.eep), W, H, dense_levels(rt, lod),
                                    volume_extent(v->metadata(), v->embedding()), cfg, tf);
  for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(img[i], ref[i], 1e-5) << i;
}

TEST(Raycast, MultiLevelMatchesReferenceWithLodSelection) {
  const std::uint64_t n = 64;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  const LodPyramid lod = build_lod(v);
  ASSERT_EQ(lod.size(), 3u);
  RaycasterConfig cfg;
  const auto tf = TransferFunction::grey_ramp(0.5, 60.0);
  const std::uint64_t W = 96, H = 80;
  Frame f = make_frame(lod, cfg, tf, W, H, 16, 16);
  Runtime rt(small_config());
  const auto img = dense(rt, f.image);
  const auto levels = dense_levels(rt, lod);
  const auto eep = dense(rt, f.eep);
  const auto ext = volume_extent(v->metadata(), v->embedding());
  std::set<std::size_t> used;
  const auto ref = reference_render(eep, W, H, levels, ext, cfg, tf, false, &used);
  EXPECT_GE(used.size(), 2u);
  for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(img[i], ref[i], 1e-5) << i;

  // Preview: same rule with the offset added.
  Runtime fresh(small_config());
  const auto prev = to_doubles(dense_bytes(fresh, f.image, ChunkState::Preview), DataType::f32(4));
  const auto ref_prev = reference_render(eep, W, H, levels, ext, cfg, tf, true);
  ASSERT_EQ(prev.size(), ref_prev.size());
  bool differs = false;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    ASSERT_NEAR(prev[i], ref_prev[i], 1e-5) << i;
    differs = differs || std::fabs(prev[i] - img[i]) > 1e-4;
  }
  EXPECT_TRUE(differs);
}

TEST(Raycast, PreviewThenFinalState) {
  const std::uint64_t n = 64;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  const LodPyramid lod = build_lod(v);
  const auto tf = TransferFunction::grey_ramp(0.1, 6.0);
  Frame f = make_frame(lod, RaycasterConfig{}, tf, 32, 32, 16, 16);
  Runtime rt(small_config());
  ChunkState s = ChunkState::Final;
  dense_bytes(rt, f.image, ChunkState::Preview, &s);
  EXPECT_EQ(s, ChunkState::Preview);
  EXPECT_EQ(rt.stored_state(*f.image, Coord{0, 0}), ChunkState::Preview);
  const auto fin = dense_bytes(rt, f.image, ChunkState::Final, &s);
  EXPECT_EQ(s, ChunkState::Final);
  EXPECT_EQ(rt.stored_state(*f.image, Coord{0, 0}), ChunkState::Final);
  Runtime fresh(small_config());
  EXPECT_EQ(fin, dense_bytes(fresh, f.image));
}

TEST(Raycast, TilesEqualWholeFrame) {
  const std::uint64_t n = 40;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  const LodPyramid lod = build_lod(v);
  RaycasterConfig cfg;
  cfg.lod_bias = 1;
  const auto tf = TransferFunction::grey_ramp(0.1, 3.0);
  for (auto comp : {Compositing::DVR, Compositing::MOP}) {
    cfg.compositing = comp;
    Runtime rt(small_config());
    const auto tiled = dense_bytes(rt, make_frame(lod, cfg, tf, 45, 31, 16, 8).image);
    const auto whole = dense_bytes(rt, make_frame(lod, cfg, tf, 45, 31, 45, 31).image);
    EXPECT_EQ(tiled, whole);
  }
}

TEST(Raycast, ConstTableNeverChangesImage) {
  const std::uint64_t n = 48;
  const auto v = volume_from(ball(n, 14, 0.6f), {n, n, n}, {8, 8, 8});
  const LodPyramid lod = build_lod(v);
  const auto tf = TransferFunction::grey_ramp(0.0, 1.0);
  for (auto comp : {Compositing::DVR, Compositing::MOP}) {
    RaycasterConfig on, off;
    on.compositing = off.compositing = comp;
    off.use_const_table = false;
    Runtime a(small_config()), b(small_config());
    const auto with = dense_bytes(a, make_frame(lod, on, tf, 40, 40, 20, 20).image);
    const auto without = dense_bytes(b, make_frame(lod, off, tf, 40, 40, 20, 20).image);
    EXPECT_EQ(with, without);
  }
}

TEST(Raycast, UniformZeroVolumeFetchesNoBricks) {
  const std::uint64_t n = 64;
  const TensorMetaData md({n, n, n}, {16, 16, 16}, DataType::f32());
  const auto tf = TransferFunction::grey_ramp(0.0, 1.0);
  const std::uint64_t W = 48;

  // Known-uniform source: nothing but table chunks is produced.
  {
    const LodPyramid lod = build_lod(constant_source(0.0, md, EmbeddingData::unit(3)));
    Frame f = make_frame(lod, RaycasterConfig{}, tf, W, W, 16, 16);
    Runtime rt(small_config());
    ChunkState s = ChunkState::Preview;
    const auto img = dense(rt, f.image);
    dense_bytes(rt, f.image, ChunkState::Final, &s);
    EXPECT_EQ(s, ChunkState::Final);
    for (double x : img) ASSERT_EQ(x, 0.0);
    const auto st = rt.stats();
    for (const auto& l : lod.levels) EXPECT_EQ(st.commits(*l), 0u);
  }
  // Stored zeros: once the tables exist, rendering reads no brick.
  {
    const LodPyramid base = build_lod(volume_from(std::vector<float>(n * n * n, 0.0f), {n, n, n}, {16, 16, 16}));
    LodPyramid lod = base;
    for (const auto& l : base.levels) lod.const_tables.push_back(const_chunk_table(l));
    Runtime rt(small_config());
    for (const auto& t : lod.const_tables) dense(rt, t);
    std::vector<std::uint64_t> before;
    for (const auto& l : lod.levels) before.push_back(rt.stats().commits(*l));
    Frame f = make_frame(lod, RaycasterConfig{}, tf, W, W, 16, 16);
    const auto img = dense(rt, f.image);
    for (double x : img) ASSERT_EQ(x, 0.0);
    for (std::size_t l = 0; l < lod.size(); ++l) EXPECT_EQ(rt.stats().commits(*lod[l]), before[l]);
    EXPECT_EQ(rt.stats().of(*f.image).preview_commits, 0u);
  }
}

TEST(Raycast, ProgressiveUnderSmallStoreEqualsSinglePass) {
  const std::uint64_t n = 64;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  const LodPyramid lod = single_level_lod(v);
  RaycasterConfig cfg;
  const auto tf = TransferFunction::grey_ramp(0.3, 8.0);
  const std::uint64_t W = 64;
  std::vector<std::byte> big, small;
  {
    Runtime rt(small_config());
    big = dense_bytes(rt, make_frame(lod, cfg, tf, W, W, 32, 32).image);
  }
  // A quarter of the volume's bytes: bricks are evicted and reloaded across rounds.
  EngineConfig ec = small_config((n * n * n * 4) / 4);
  ec.max_active_tasks_per_operator = 1;
  ec.max_requests_per_task = 4;
  Runtime rt(ec);
  small = dense_bytes(rt, make_frame(lod, cfg, tf, W, W, 32, 32).image);
  EXPECT_EQ(big, small);
  EXPECT_GT(rt.stats().reclaimer_calls, 0u);
  EXPECT_GT(rt.stats().commits(*v), n * n * n / (16 * 16 * 16));
}

TEST(Raycast, ForcedLevelZeroEqualsSingleLevel) {
  const std::uint64_t n = 32;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  RaycasterConfig cfg;
  cfg.lod_bias = -30;
  const auto tf = TransferFunction::grey_ramp(0.1, 3.0);
  Runtime rt(small_config());
  const auto a = dense_bytes(rt, make_frame(single_level_lod(v), cfg, tf, 30, 30, 16, 16).image);
  const auto b = dense_bytes(rt, make_frame(build_lod(v), cfg, tf, 30, 30, 16, 16).image);
  EXPECT_EQ(a, b);
}

TEST(Raycast, RequestTableHasNoDropsOnFullTile) {
  // Every brick of a 68^3-brick volume touched by the rays of one 512x512 tile, reported into
  // a default-sized table.
  const std::uint64_t n = 68 * 8;
  const TensorMetaData md({n, n, n}, {68, 68, 68}, DataType::u8());
  const CameraState cam = camera_for_volume(md, EmbeddingData::unit(3), 60);
  Runtime rt(small_config());
  const auto eep = dense(rt, entry_exit_points(md, EmbeddingData::unit(3), frame_metadata(512, 512, 512, 512),
                                               cam.projection(1.0)));
  RequestTable table;
  std::set<std::uint64_t> distinct;
  for (std::uint64_t p = 0; p < 512 * 512; ++p) {
    const double* e = &eep[p * 8];
    if (e[3] < 0) continue;
    const Eigen::Vector3d a = Eigen::Vector3d(e[0], e[1], e[2]) * n, b = Eigen::Vector3d(e[4], e[5], e[6]) * n;
    const double len = (b - a).norm();
    for (double s = 0; s < len; s += 0.5) {
      const Eigen::Vector3d q = a + (b - a) * (s / len);
      Coord h(3);
      for (int d = 0; d < 3; ++d)
        h[d] = std::min<std::uint64_t>(7, static_cast<std::uint64_t>(std::max(0.0, q[2 - d])) / 68);
      const std::uint64_t lin = linearize(md.chunk_grid(), h);
      distinct.insert(lin);
      table.note(UseKey{lin, 0, false});
    }
  }
  EXPECT_EQ(table.drops(), 0u);
  EXPECT_EQ(table.drain().size(), distinct.size());
}

// ---- Views ----

namespace {

OperatorPtr image_u8(std::uint64_t h, std::uint64_t w, std::uint64_t chunk, std::size_t lanes) {
  std::vector<std::byte> px(h * w * lanes);
  for (std::uint64_t y = 0; y < h; ++y)
    for (std::uint64_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < lanes; ++c)
        px[(y * w + x) * lanes + c] = static_cast<std::byte>((y * 7 + x * 3 + c * 50) % 251);
  return source_from_array(std::move(px), TensorMetaData({h, w}, {chunk, chunk}, DataType{ScalarKind::U8, static_cast<std::uint8_t>(lanes)}),
                           EmbeddingData::unit(2));
}

}  // namespace

TEST(ImageView, IdentityShowsSource) {
  const auto img = image_u8(40, 40, 16, 3);
  Runtime rt(small_config());
  const auto src = dense_bytes(rt, img);
  const auto view = image_view(single_level_lod(img), PanZoom{}, frame_metadata(40, 40, 16, 16));
  EXPECT_EQ(view->metadata().dtype, img->metadata().dtype);
  EXPECT_EQ(dense_bytes(rt, view), src);
}

TEST(ImageView, ZoomSelectsLevel) {
  const auto img = image_u8(64, 64, 16, 1);
  const LodPyramid lod = build_lod(img);
  ASSERT_EQ(lod.size(), 3u);
  Runtime rt(small_config());
  for (std::size_t l = 0; l < 3; ++l) {
    const double zoom = 1.0 / static_cast<double>(1u << l);
    const auto level = dense_bytes(rt, lod[l]);
    const std::uint64_t side = 64 >> l;
    const auto view = dense_bytes(rt, image_view(lod, PanZoom{zoom, 0, 0}, frame_metadata(side, side, 16, 16)));
    EXPECT_EQ(view, level) << "level " << l;
  }
}

TEST(ImageView, MagnifiedPixelsRepeatSource) {
  const auto img = image_u8(16, 16, 8, 1);
  Runtime rt(small_config());
  const auto src = dense_bytes(rt, img);
  const auto view = dense_bytes(rt, image_view(single_level_lod(img), PanZoom{4.0, 2.0, 3.0},
                                               frame_metadata(20, 12, 8, 8)));
  for (std::uint64_t r = 0; r < 12; ++r)
    for (std::uint64_t c = 0; c < 20; ++c) {
      const std::uint64_t y = static_cast<std::uint64_t>(std::floor(3.0 + (r + 0.5) / 4));
      const std::uint64_t x = static_cast<std::uint64_t>(std::floor(2.0 + (c + 0.5) / 4));
      EXPECT_EQ(view[r * 20 + c], src[y * 16 + x]);
    }
}

TEST(ImageView, PanBeyondTensorIsBackground) {
  const auto img = image_u8(32, 32, 16, 4);
  Runtime rt(small_config());
  const auto v1 = dense_bytes(rt, image_view(single_level_lod(img), PanZoom{1.0, 100, 0}, frame_metadata(16, 16, 16, 16)));
  for (auto b : v1) ASSERT_EQ(b, std::byte{0});
  const auto v2 = dense_bytes(rt, image_view(single_level_lod(img), PanZoom{1.0, -8, -8}, frame_metadata(16, 16, 16, 16)));
  const auto src = dense_bytes(rt, img);
  for (std::uint64_t r = 0; r < 16; ++r)
    for (std::uint64_t c = 0; c < 16; ++c)
      for (int k = 0; k < 4; ++k) {
        const std::byte want = (r < 8 || c < 8) ? std::byte{0} : src[((r - 8) * 32 + (c - 8)) * 4 + k];
        EXPECT_EQ(v2[(r * 16 + c) * 4 + k], want);
      }
}

TEST(ImageView, TilesHaveNoSeams) {
  const auto img = image_u8(100, 90, 16, 3);
  const LodPyramid lod = build_lod(img);
  Runtime rt(small_config());
  for (const PanZoom pz : {PanZoom{0.7, 3.3, -2.1}, PanZoom{0.3, 0, 0}, PanZoom{2.5, 10, 20}}) {
    const auto tiled = dense_bytes(rt, image_view(lod, pz, frame_metadata(57, 43, 16, 16)));
    const auto whole = dense_bytes(rt, image_view(lod, pz, frame_metadata(57, 43, 57, 43)));
    EXPECT_EQ(tiled, whole);
  }
  EXPECT_THROW(image_view(build_lod(volume_from(std::vector<float>(8), {2, 2, 2}, {2, 2, 2})), PanZoom{},
                          frame_metadata(8, 8, 8, 8)),
               InvalidArgument);
}

TEST(SliceView, IdentityShowsSlice) {
  const std::uint64_t n = 24;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {8, 8, 8});
  const auto field = smooth_field(n);
  Runtime rt(small_config());
  for (std::size_t dim = 0; dim < 3; ++dim) {
    const auto view = dense(rt, slice_view(single_level_lod(v), dim, 5, PanZoom{}, frame_metadata(n, n, 16, 16)));
    for (std::uint64_t a = 0; a < n; ++a)
      for (std::uint64_t b = 0; b < n; ++b) {
        std::uint64_t g[3];
        g[dim] = 5;
        g[dim == 0 ? 1 : 0] = a;
        g[dim == 2 ? 1 : 2] = b;
        ASSERT_EQ(view[a * n + b], static_cast<double>(field[(g[0] * n + g[1]) * n + g[2]]));
      }
  }
  EXPECT_THROW(slice_view(single_level_lod(v), 3, 0, PanZoom{}, frame_metadata(8, 8, 8, 8)), InvalidArgument);
  EXPECT_THROW(slice_view(single_level_lod(v), 0, n, PanZoom{}, frame_metadata(8, 8, 8, 8)), InvalidCoordinate);
}

TEST(SliceView, HalfZoomSamplesLevelOne) {
  const std::uint64_t n = 32;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  const LodPyramid lod = build_lod(v);
  ASSERT_EQ(lod.size(), 2u);
  Runtime rt(small_config());
  const auto view = dense(rt, slice_view(lod, 0, 9, PanZoom{0.5, 0, 0}, frame_metadata(16, 16, 16, 16)));
  const auto level1 = dense(rt, lod[1]);
  for (std::uint64_t a = 0; a < 16; ++a)
    for (std::uint64_t b = 0; b < 16; ++b) ASSERT_EQ(view[a * 16 + b], level1[(4 * 16 + a) * 16 + b]);
}

TEST(SliceView, TilesHaveNoSeams) {
  const std::uint64_t n = 40;
  const auto v = volume_from(smooth_field(n), {n, n, n}, {16, 16, 16});
  const LodPyramid lod = build_lod(v);
  Runtime rt(small_config());
  const PanZoom pz{0.8, -3, 4};
  EXPECT_EQ(dense_bytes(rt, slice_view(lod, 1, 17, pz, frame_metadata(50, 37, 16, 16))),
            dense_bytes(rt, slice_view(lod, 1, 17, pz, frame_metadata(50, 37, 50, 37))));
}

// ---- Conversion ----

TEST(Rgba8, Conversions) {
  const auto tf = TransferFunction::grey_ramp(0, 1);
  const std::vector<float> f4{0.5f, 0.25f, 1.5f, -1.0f};
  std::vector<std::byte> b(16);
  std::memcpy(b.data(), f4.data(), 16);
  EXPECT_EQ(to_rgba8(b, DataType::f32(4), tf), (std::vector<std::uint8_t>{128, 64, 255, 0}));
  const std::vector<std::byte> u3{std::byte{1}, std::byte{2}, std::byte{3}};
  EXPECT_EQ(to_rgba8(u3, DataType{ScalarKind::U8, 3}, tf), (std::vector<std::uint8_t>{1, 2, 3, 255}));
  const std::vector<float> s{0.5f};
  std::vector<std::byte> sb(4);
  std::memcpy(sb.data(), s.data(), 4);
  EXPECT_EQ(to_rgba8(sb, DataType::f32(), tf), (std::vector<std::uint8_t>{64, 64, 64, 128}));
}
