// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <mutex>
#include <random>
#include <set>

#include "chunkflow/operators.hpp"

using namespace chunkflow;

namespace {

EngineConfig small_config() {
  EngineConfig cfg;
  cfg.worker_pool_size = 2;
  cfg.ram = StoreConfig{std::uint64_t{256} << 20};
  return cfg;
}

std::uint64_t elements(const Coord& s) {
  std::uint64_t n = 1;
  for (auto v : s) n *= v;
  return n;
}

// Whole tensor as doubles (lanes interleaved), assembled from resolved chunks.
std::vector<double> dense(Runtime& rt, const OperatorPtr& op) {
  const TensorMetaData& md = op->metadata();
  std::vector<Coord> all;
  for (std::uint64_t i = 0; i < md.num_chunks(); ++i) all.push_back(delinearize(md.chunk_grid(), i));
  auto chunks = rt.resolve(op, all);
  std::map<Coord, std::size_t> at;
  for (std::size_t i = 0; i < all.size(); ++i) at[all[i]] = i;
  std::vector<std::byte> out(elements(md.size) * md.dtype.size());
  gather_region(md, Region{Coord(md.num_dims(), 0), md.size},
                [&](const Coord& h) { return std::span<const std::byte>(chunks[at.at(h)].data); }, out);
  return to_doubles(out, md.dtype);
}

template <class T>
std::vector<std::byte> as_bytes(const std::vector<T>& v) {
  std::vector<std::byte> b(v.size() * sizeof(T));
  std::memcpy(b.data(), v.data(), b.size());
  return b;
}

std::vector<float> random_floats(std::size_t n, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(-10.0f, 10.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

OperatorPtr f32_array(const std::vector<float>& v, Coord size, Coord chunk) {
  return source_from_array(as_bytes(v), TensorMetaData(size, std::move(chunk), DataType::f32()),
                           EmbeddingData::unit(size.size()));
}

// Reference separable convolution on a dense row-major array, clamp borders, double precision.
std::vector<double> dense_conv(std::vector<double> v, const Coord& size, const SeparableKernel& k) {
  const std::size_t d = size.size();
  const Coord str = row_major_strides(size);
  for (std::size_t dim = 0; dim < d; ++dim) {
    const auto& w = k.per_dim[dim];
    const std::int64_t r = static_cast<std::int64_t>(w.size() / 2);
    std::vector<double> out(v.size());
    for (std::uint64_t e = 0; e < v.size(); ++e) {
      const std::int64_t x = static_cast<std::int64_t>((e / str[dim]) % size[dim]);
      const std::uint64_t base = e - static_cast<std::uint64_t>(x) * str[dim];
      double acc = 0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const std::int64_t s = std::clamp<std::int64_t>(x + r - static_cast<std::int64_t>(j), 0,
                                                        static_cast<std::int64_t>(size[dim]) - 1);
        acc += w[j] * v[base + static_cast<std::uint64_t>(s) * str[dim]];
      }
      out[e] = acc;
    }
    v = std::move(out);
  }
  return v;
}

// Power-8 triplex iteration written independently of the library.
double bulb_oracle(double cx, double cy, double cz) {
  double x = 0, y = 0, z = 0;
  for (int n = 0; n < 8; ++n) {
    const double r = std::hypot(x, y, z);
    if (r == 0) {
      x = cx, y = cy, z = cz;
    } else {
      const double th = 8 * std::acos(z / r), ph = 8 * std::atan2(y, x);
      const double r8 = r * r * r * r * r * r * r * r;
      x = r8 * std::sin(th) * std::cos(ph) + cx;
      y = r8 * std::sin(th) * std::sin(ph) + cy;
      z = r8 * std::cos(th) + cz;
    }
    const double m = std::hypot(x, y, z);
    if (m > 2) {
      const double mu = n + 1 - std::log2(std::log2(m)) / 3.0;
      return std::min(1.0, std::max(0.0, mu / 8));
    }
  }
  return 1.0;
}

struct ChunkRecorder {
  std::mutex mu;
  std::set<Coord> chunks;
  std::uint64_t calls = 0;
};

// f32 procedural source recording the chunks of every generated element.
OperatorPtr recorded_source(Coord size, Coord chunk, std::shared_ptr<ChunkRecorder> rec, std::uint64_t salt = 0) {
  auto gen = [rec, chunk](std::span<const std::uint64_t> g) {
    Coord h(g.size());
    double v = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      h[i] = g[i] / chunk[i];
      v = v * 31 + static_cast<double>(g[i] % 17);
    }
    std::lock_guard lock(rec->mu);
    rec->chunks.insert(h);
    ++rec->calls;
    return v;
  };
  const std::size_t d = size.size();
  return source_procedural("recorded", ParamWriter().u64(salt).data(), gen,
                           TensorMetaData(std::move(size), std::move(chunk), DataType::f32()), EmbeddingData::unit(d));
}

// ---- Region utilities ----

TEST(RegionTest, OverlappingChunksMatchBruteForce) {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng() % 3;
    Coord size(d), chunk(d);
    Region r{Coord(d), Coord(d)};
    for (std::size_t i = 0; i < d; ++i) {
      size[i] = 1 + rng() % 20;
      chunk[i] = 1 + rng() % 6;
      r.begin[i] = rng() % size[i];
      r.end[i] = r.begin[i] + rng() % (size[i] - r.begin[i] + 1);
    }
    const TensorMetaData md(size, chunk, DataType::u8());
    std::set<Coord> expected;
    for (const Coord& g : positions_in(r)) {
      Coord h(d);
      for (std::size_t i = 0; i < d; ++i) h[i] = g[i] / chunk[i];
      expected.insert(h);
    }
    const auto got = chunks_overlapping(md, r);
    EXPECT_EQ(std::set<Coord>(got.begin(), got.end()), expected);
    EXPECT_EQ(got.size(), expected.size());
    EXPECT_EQ(positions_in(r).size(), r.volume());
  }
}

TEST(RegionTest, RegionBeyondTensorThrows) {
  const TensorMetaData md({4, 4}, {2, 2}, DataType::u8());
  EXPECT_THROW(chunks_overlapping(md, Region{{0, 0}, {5, 4}}), InvalidCoordinate);
}

// ---- Sources ----

TEST(SourceTest, SingleChunkEqualsInput) {
  Runtime rt(small_config());
  const auto v = random_floats(16, 1);
  auto src = f32_array(v, {4, 4}, {4, 4});
  auto c = rt.resolve_one(src, {0, 0});
  EXPECT_EQ(c.data, as_bytes(v));
}

TEST(SourceTest, BorderChunkIsZeroPadded) {
  Runtime rt(small_config());
  std::vector<float> v(25);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i + 1);
  auto src = f32_array(v, {5, 5}, {4, 4});
  auto c = rt.resolve_one(src, {1, 1});
  const auto f = to_doubles(c.data, DataType::f32());
  ASSERT_EQ(f.size(), 16u);
  EXPECT_EQ(f[0], 25.0);
  EXPECT_EQ(std::count(f.begin(), f.end(), 0.0), 15);
}

TEST(SourceTest, RoundtripIsBitwise) {
  Runtime rt(small_config());
  const auto v = random_floats(7 * 9 * 5, 2);
  auto src = f32_array(v, {7, 9, 5}, {3, 4, 2});
  const auto back = dense(rt, src);
  ASSERT_EQ(back.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(static_cast<float>(back[i]), v[i]);
}

TEST(SourceTest, ArrayShapeMismatchThrows) {
  EXPECT_THROW(f32_array(std::vector<float>(15), {4, 4}, {4, 4}), ShapeMismatch);
}

TEST(SourceTest, ConstantSourceIsUniform) {
  Runtime rt(small_config());
  auto src = constant_source(1.0, TensorMetaData({10, 7, 3}, {4, 4, 4}, DataType::f32()), EmbeddingData::unit(3));
  const auto v = dense(rt, src);
  EXPECT_TRUE(std::all_of(v.begin(), v.end(), [](double x) { return x == 1.0; }));
  EXPECT_EQ(src->known_uniform(), 1.0);
}

TEST(SourceTest, MandelbulbMatchesPerVoxelOracle) {
  Runtime rt(small_config());
  auto src = mandelbulb_source(TensorMetaData({64, 64, 64}, {32, 32, 32}, DataType::f32()), EmbeddingData::unit(3));
  const auto v = dense(rt, src);
  std::size_t inside = 0;
  double worst = 0;
  for (std::uint64_t z = 0; z < 64; ++z)
    for (std::uint64_t y = 0; y < 64; ++y)
      for (std::uint64_t x = 0; x < 64; ++x) {
        auto c = [](std::uint64_t i) { return -1.2 + 2.4 * (static_cast<double>(i) + 0.5) / 64.0; };
        const double want = static_cast<float>(bulb_oracle(c(x), c(y), c(z)));
        const double got = v[(z * 64 + y) * 64 + x];
        worst = std::max(worst, std::fabs(got - want));
        inside += got == 1.0;
      }
  EXPECT_LE(worst, 1e-6);
  EXPECT_GT(inside, 0u);
  EXPECT_LT(inside, 64u * 64u * 64u);
}

TEST(SourceTest, HugeProceduralMetadataIsValid) {
  const TensorMetaData md({8000000, 8000000, 8000000}, {128, 128, 128}, DataType::u8());
  EXPECT_NO_THROW(md.validate());
  EXPECT_EQ(md.chunk_grid(), (Coord{62500, 62500, 62500}));
}

TEST(SourceTest, ProceduralIdentityFollowsNameAndParams) {
  auto gen = [](std::span<const std::uint64_t>) { return 0.0; };
  const TensorMetaData md({8, 8}, {4, 4}, DataType::f32());
  auto a = source_procedural("g", ParamWriter().u64(1).data(), gen, md, EmbeddingData::unit(2));
  auto b = source_procedural("g", ParamWriter().u64(1).data(), gen, md, EmbeddingData::unit(2));
  auto c = source_procedural("g", ParamWriter().u64(2).data(), gen, md, EmbeddingData::unit(2));
  EXPECT_EQ(a->id(), b->id());
  EXPECT_NE(a->id(), c->id());
}

// ---- Pointwise ----

TEST(PointwiseTest, AbsDiffOfEqualInputsIsZero) {
  Runtime rt(small_config());
  const auto v = random_floats(10 * 10, 3);
  auto a = f32_array(v, {10, 10}, {4, 4});
  auto b = f32_array(v, {10, 10}, {4, 4});
  const auto out = dense(rt, pointwise((input(a) - input(b)).abs()));
  EXPECT_TRUE(std::all_of(out.begin(), out.end(), [](double x) { return x == 0.0; }));
}

TEST(PointwiseTest, MatchesDenseEvaluation) {
  Runtime rt(small_config());
  const auto va = random_floats(9 * 6, 4);
  const auto vb = random_floats(9 * 6, 5);
  auto a = f32_array(va, {9, 6}, {4, 4});
  auto b = f32_array(vb, {9, 6}, {4, 4});
  const auto out = dense(rt, pointwise(max(input(a) * constant(2.0), input(b)) / (abs(input(b)) + constant(1.0))));
  for (std::size_t i = 0; i < va.size(); ++i) {
    const float m = std::max(static_cast<float>(va[i] * 2.0), vb[i]);
    const float den = static_cast<float>(std::fabs(vb[i]) + 1.0);
    EXPECT_EQ(static_cast<float>(out[i]), static_cast<float>(static_cast<double>(m) / den)) << i;
  }
}

TEST(PointwiseTest, FusedEqualsUnfusedBitwise) {
  Runtime rt(small_config());
  // Two RGBA frames; abs difference then cast to u8 x4.
  std::mt19937 rng(6);
  std::vector<float> f0(6 * 5 * 4), f1(6 * 5 * 4);
  for (auto& x : f0) x = static_cast<float>(rng() % 1000) / 3.0f;
  for (auto& x : f1) x = static_cast<float>(rng() % 1000) / 3.0f;
  const TensorMetaData md({6, 5}, {4, 4}, DataType::f32(4));
  auto a = source_from_array(as_bytes(f0), md, EmbeddingData::unit(2));
  auto b = source_from_array(as_bytes(f1), md, EmbeddingData::unit(2));

  auto fused = pointwise(cast(abs(input(a) - input(b)), DataType::u8(4)), true);
  auto diff = pointwise(abs(input(a) - input(b)), false);
  auto unfused = pointwise(cast(input(diff), DataType::u8(4)), false);
  EXPECT_EQ(fused->metadata().dtype, DataType::u8(4));
  EXPECT_EQ(dense(rt, fused), dense(rt, unfused));

  Runtime rt2(small_config());
  auto two_step_fused = pointwise(cast(input(diff), DataType::u8(4)), true);
  for (std::uint64_t i = 0; i < two_step_fused->metadata().num_chunks(); ++i) {
    const Coord h = delinearize(two_step_fused->metadata().chunk_grid(), i);
    EXPECT_EQ(rt2.resolve_one(two_step_fused, h).data, rt2.resolve_one(unfused, h).data);
  }
}

TEST(PointwiseTest, FiveOpChainMaterializesNoIntermediates) {
  Runtime rt(small_config());
  auto a = f32_array(random_floats(12 * 12, 7), {12, 12}, {4, 4});
  std::vector<OperatorPtr> chain{a};
  for (int i = 0; i < 5; ++i) chain.push_back(pointwise(input(chain.back()) * constant(1.5) + constant(i)));
  const auto fused = dense(rt, chain.back());
  const auto stats = rt.stats();
  for (int i = 1; i < 5; ++i) EXPECT_EQ(stats.commits(*chain[i]), 0u) << i;
  EXPECT_EQ(stats.commits(*chain.back()), 9u);
  EXPECT_EQ(fused_op_count(*chain.back()), 10u);

  Runtime rt2(small_config());
  std::vector<OperatorPtr> plain{a};
  for (int i = 0; i < 5; ++i) plain.push_back(pointwise(input(plain.back()) * constant(1.5) + constant(i), false));
  EXPECT_EQ(dense(rt2, plain.back()), fused);
  EXPECT_EQ(rt2.stats().commits(*plain[1]), 9u);
}

TEST(PointwiseTest, TypeMismatchWithoutCastThrows) {
  auto a = f32_array(std::vector<float>(16), {4, 4}, {4, 4});
  auto b = source_from_array(std::vector<std::byte>(16), TensorMetaData({4, 4}, {4, 4}, DataType::u8()),
                             EmbeddingData::unit(2));
  EXPECT_THROW(pointwise(input(a) + input(b)), TypeMismatch);
  EXPECT_NO_THROW(pointwise(input(a) + cast(input(b), DataType::f32())));
}

TEST(PointwiseTest, MetadataDisagreementThrows) {
  auto a = f32_array(std::vector<float>(16), {4, 4}, {4, 4});
  auto b = f32_array(std::vector<float>(16), {4, 4}, {2, 2});
  EXPECT_THROW(pointwise(input(a) + input(b)), ShapeMismatch);
}

TEST(CastTest, RoundsToNearestEvenAndSaturates) {
  Runtime rt(small_config());
  const std::vector<float> v{300.7f, 70000.0f, -70000.0f, 2.5f, 3.5f, -2.5f, 0.49f, 1.0f};
  auto a = f32_array(v, {8}, {8});
  const auto out = dense(rt, cast(a, DataType::i16()));
  EXPECT_EQ(out, (std::vector<double>{301, 32767, -32768, 2, 4, -2, 0, 1}));
}

TEST(CastTest, U8ToF32IsExact) {
  Runtime rt(small_config());
  std::vector<std::byte> bytes(256);
  for (std::size_t i = 0; i < 256; ++i) bytes[i] = static_cast<std::byte>(i);
  auto a = source_from_array(bytes, TensorMetaData({256}, {64}, DataType::u8()), EmbeddingData::unit(1));
  const auto out = dense(rt, cast(a, DataType::f32()));
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(out[i], static_cast<double>(i));
}

// ---- Convolution ----

TEST(ConvTest, IdentityKernelIsIdentity) {
  Runtime rt(small_config());
  const auto v = random_floats(10 * 7, 8);
  auto a = f32_array(v, {10, 7}, {4, 4});
  const auto out = dense(rt, separable_conv(a, SeparableKernel::uniform(2, {1.0})));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(static_cast<float>(out[i]), v[i]);
}

TEST(ConvTest, BinomialKeepsConstant) {
  Runtime rt(small_config());
  auto a = f32_array(std::vector<float>(9 * 9, 3.25f), {9, 9}, {4, 4});
  const auto out = dense(rt, separable_conv(a, SeparableKernel::binomial(2)));
  EXPECT_TRUE(std::all_of(out.begin(), out.end(), [](double x) { return x == 3.25; }));
}

void expect_conv_matches_oracle(Coord size, Coord chunk, SeparableKernel k, std::uint32_t seed) {
  Runtime rt(small_config());
  const auto v = random_floats(elements(size), seed);
  auto a = f32_array(v, size, chunk);
  const auto out = dense(rt, separable_conv(a, k));
  const auto want = dense_conv(std::vector<double>(v.begin(), v.end()), size, k);
  for (std::size_t i = 0; i < v.size(); ++i)
    EXPECT_LE(std::fabs(out[i] - want[i]), 1e-5 * std::max(1.0, std::fabs(want[i]))) << i;
}

TEST(ConvTest, Random2DMatchesDenseOracle) {
  expect_conv_matches_oracle({12, 12}, {4, 4}, SeparableKernel::uniform(2, {0.1, 0.2, 0.4, 0.2, 0.1}), 9);
}

TEST(ConvTest, Random3DMatchesDenseOracle) {
  SeparableKernel k;
  k.per_dim = {{0.25, 0.5, 0.25}, {1.0}, {-1.0, 0.0, 2.0, 0.5, 0.25, 0.125, 3.0}};
  expect_conv_matches_oracle({12, 12, 12}, {4, 4, 4}, k, 10);
}

TEST(ConvTest, WideKernelSpansSeveralChunks) {
  expect_conv_matches_oracle({11, 5}, {2, 3}, SeparableKernel::uniform(2, {1, 2, 3, 4, 5, 6, 7, 8, 9}), 11);
}

TEST(ConvTest, RequestsExactlyTheDilatedFootprint) {
  auto rec = std::make_shared<ChunkRecorder>();
  auto src = recorded_source({16, 16}, {4, 4}, rec);
  const auto k = SeparableKernel::uniform(2, {0.2, 0.2, 0.2, 0.2, 0.2});
  auto conv = separable_conv(src, k);
  for (const Coord h : {Coord{0, 0}, Coord{1, 2}, Coord{3, 3}}) {
    Runtime rt(small_config());
    {
      std::lock_guard lock(rec->mu);
      rec->chunks.clear();
    }
    rt.resolve_one(conv, h);
    const auto deps = conv_dependencies(src->metadata(), k, h);
    EXPECT_EQ(rec->chunks, std::set<Coord>(deps.begin(), deps.end()));
    std::set<Coord> expected;
    for (std::uint64_t y = 0; y < 4; ++y)
      for (std::uint64_t x = 0; x < 4; ++x)
        if (y + 1 >= h[0] && y <= h[0] + 1 && x + 1 >= h[1] && x <= h[1] + 1) expected.insert({y, x});
    EXPECT_EQ(rec->chunks, expected);
  }
}

TEST(ConvTest, InvalidKernelsThrow) {
  auto a = f32_array(std::vector<float>(16), {4, 4}, {4, 4});
  EXPECT_THROW(separable_conv(a, SeparableKernel::uniform(2, {1, 1})), InvalidArgument);
  EXPECT_THROW(separable_conv(a, SeparableKernel::uniform(2, std::vector<double>(11, 0.1))), InvalidArgument);
  EXPECT_THROW(separable_conv(a, SeparableKernel::uniform(2, {std::nan(""), 1, 0})), InvalidArgument);
  EXPECT_NO_THROW(separable_conv(a, SeparableKernel::uniform(2, std::vector<double>(9, 0.1))));
}

// ---- Slicing ----

TEST(SliceTest, FourDSliceIsTheBlock) {
  Runtime rt(small_config());
  std::vector<float> v(3 * 2 * 2 * 2);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  auto a = f32_array(v, {3, 2, 2, 2}, {2, 2, 1, 2});
  auto s = slice(a, 0, 1);
  EXPECT_EQ(s->metadata().size, (Coord{2, 2, 2}));
  EXPECT_EQ(s->metadata().chunk_size, (Coord{2, 1, 2}));
  const auto out = dense(rt, s);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[i], 8.0 + i);
}

TEST(SliceTest, SliceOfSliceIsDirectLookup) {
  Runtime rt(small_config());
  const Coord size{5, 6, 7};
  const auto v = random_floats(elements(size), 12);
  auto a = f32_array(v, size, {2, 4, 3});
  for (std::uint64_t i = 0; i < 5; i += 2)
    for (std::uint64_t j : {0u, 3u, 6u}) {
      const auto out = dense(rt, slice(slice(a, 0, i), 1, j));
      ASSERT_EQ(out.size(), 6u);
      for (std::uint64_t y = 0; y < 6; ++y) EXPECT_EQ(static_cast<float>(out[y]), v[(i * 6 + y) * 7 + j]);
    }
}

TEST(SliceTest, ProceduralSliceGeneratesOnlyItsColumn) {
  auto rec = std::make_shared<ChunkRecorder>();
  auto src = recorded_source({20, 8, 8}, {4, 4, 4}, rec, 1);
  Runtime rt(small_config());
  dense(rt, slice(src, 0, 9));
  // Only the chunks holding index 9 along dim 0 are generated: 4 x 8 x 8 elements.
  EXPECT_EQ(rec->calls, 4u * 8u * 8u);
  for (const auto& h : rec->chunks) EXPECT_EQ(h[0], 2u);
}

TEST(SliceTest, OutOfRangeThrows) {
  auto a = f32_array(std::vector<float>(16), {4, 4}, {4, 4});
  EXPECT_THROW(slice(a, 0, 4), InvalidCoordinate);
  EXPECT_THROW(slice(a, 2, 0), InvalidArgument);
}

// ---- Downsampling and LOD ----

TEST(DownsampleTest, PairMean) {
  Runtime rt(small_config());
  auto a = f32_array({1.0f, 3.0f}, {2}, {2});
  auto d = downsample_mean(a, {true});
  EXPECT_EQ(d->metadata().size, Coord{1});
  EXPECT_EQ(dense(rt, d), std::vector<double>{2.0});
  EXPECT_EQ(d->embedding().spacing, std::vector<double>{2.0});
}

TEST(DownsampleTest, OddBorderAveragesValidElements) {
  Runtime rt(small_config());
  auto a = f32_array({1, 2, 3, 4, 10}, {5}, {2});
  auto d = downsample_mean(a, {true});
  EXPECT_EQ(d->metadata().size, Coord{3});
  EXPECT_EQ(dense(rt, d), (std::vector<double>{1.5, 3.5, 10.0}));
}

TEST(DownsampleTest, MatchesBlockMeanOracle) {
  Runtime rt(small_config());
  const Coord size{7, 5, 6};
  const auto v = random_floats(elements(size), 13);
  auto a = f32_array(v, size, {3, 2, 4});
  const std::vector<bool> dims{true, false, true};
  auto d = downsample_mean(a, dims);
  const auto out = dense(rt, d);
  const Coord os = d->metadata().size;
  EXPECT_EQ(os, (Coord{4, 5, 3}));
  for (const Coord& o : positions_in(Region{{0, 0, 0}, os})) {
    double sum = 0;
    int n = 0;
    for (const Coord& g : positions_in(Region{{0, 0, 0}, size})) {
      if (g[0] / 2 == o[0] && g[1] == o[1] && g[2] / 2 == o[2]) {
        sum += v[(g[0] * 5 + g[1]) * 6 + g[2]];
        ++n;
      }
    }
    const double got = out[(o[0] * 5 + o[1]) * 3 + o[2]];
    EXPECT_NEAR(got, sum / n, 1e-5) << to_string(o);
  }
}

TEST(DownsampleTest, ConstantStaysConstant) {
  Runtime rt(small_config());
  auto a = f32_array(std::vector<float>(9 * 9, 0.1f), {9, 9}, {4, 4});
  const auto out = dense(rt, downsample_mean(a, {true, true}));
  EXPECT_EQ(out.size(), 25u);
  EXPECT_TRUE(std::all_of(out.begin(), out.end(), [](double x) { return x == static_cast<double>(0.1f); }));
}

TEST(LodTest, SmallVolumeHasOneLevel) {
  auto src = constant_source(0, TensorMetaData({64, 64, 64}, {64, 64, 64}, DataType::u8()), EmbeddingData::unit(3));
  EXPECT_EQ(build_lod(src).size(), 1u);
}

TEST(LodTest, LevelsHalveAndKeepPhysicalSize) {
  auto src = constant_source(0, TensorMetaData({256, 256, 256}, {64, 64, 64}, DataType::u8()),
                             EmbeddingData{{0.5, 1.0, 2.0}});
  const auto p = build_lod(src);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[1]->metadata().size, (Coord{128, 128, 128}));
  EXPECT_EQ(p[2]->metadata().size, (Coord{64, 64, 64}));
  EXPECT_EQ(p[1]->embedding().spacing, (std::vector<double>{1.0, 2.0, 4.0}));
  for (std::size_t k = 0; k < p.size(); ++k)
    EXPECT_EQ(p[k]->embedding().physical_size(p[k]->metadata()), (std::vector<double>{128, 256, 512}));
  EXPECT_NO_THROW(p.validate());
}

TEST(LodTest, AnisotropicSizesStopPerDimension) {
  auto src = constant_source(0, TensorMetaData({300, 40}, {32, 32}, DataType::f32()), EmbeddingData::unit(2));
  const auto p = build_lod(src);
  std::vector<Coord> sizes;
  for (const auto& l : p.levels) sizes.push_back(l->metadata().size);
  EXPECT_EQ(sizes, (std::vector<Coord>{{300, 40}, {150, 20}, {75, 20}, {38, 20}, {19, 20}}));
  EXPECT_NO_THROW(p.validate());
}

TEST(LodTest, LevelMatchesSmoothThenDownsampleOracle) {
  Runtime rt(small_config());
  const Coord size{10, 9};
  const auto v = random_floats(elements(size), 14);
  auto a = f32_array(v, size, {4, 4});
  const auto p = build_lod(a);
  ASSERT_GE(p.size(), 2u);
  const auto smooth = dense_conv(std::vector<double>(v.begin(), v.end()), size, SeparableKernel::binomial(2));
  std::vector<float> smooth_f(smooth.begin(), smooth.end());
  const auto out = dense(rt, p[1]);
  for (std::uint64_t y = 0; y < 5; ++y)
    for (std::uint64_t x = 0; x < 5; ++x) {
      double s = 0;
      int n = 0;
      for (std::uint64_t dy = 0; dy < 2; ++dy)
        for (std::uint64_t dx = 0; dx < 2; ++dx)
          if (2 * y + dy < 10 && 2 * x + dx < 9) {
            s += smooth_f[(2 * y + dy) * 9 + 2 * x + dx];
            ++n;
          }
      EXPECT_NEAR(out[y * 5 + x], s / n, 1e-5);
    }
}

TEST(LodTest, ValidateRejectsInconsistentLevels) {
  const TensorMetaData md({64, 64}, {16, 16}, DataType::f32());
  auto a = constant_source(0, md, EmbeddingData::unit(2));
  auto wrong = constant_source(0, TensorMetaData({32, 32}, {16, 16}, DataType::f32()), EmbeddingData::unit(2));
  EXPECT_THROW((LodPyramid{{a, wrong}}.validate()), InvalidArgument);
  EXPECT_THROW((LodPyramid{{wrong, a}}.validate()), InvalidArgument);
}

TEST(LodTest, SingleLevelPassesEmbeddingThrough) {
  auto a = constant_source(0, TensorMetaData({300, 300}, {32, 32}, DataType::f32()), EmbeddingData{{0.3, 0.7}});
  const auto p = single_level_lod(a);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0], a);
  EXPECT_EQ(p[0]->embedding().spacing, (std::vector<double>{0.3, 0.7}));
}

// ---- Const chunk table ----

TEST(ConstTableTest, ZeroVolumeHasNoSentinels) {
  Runtime rt(small_config());
  auto a = source_from_array(std::vector<std::byte>(16 * 16 * 16), TensorMetaData({16, 16, 16}, {4, 4, 4}, DataType::u8()),
                             EmbeddingData::unit(3));
  auto t = const_chunk_table(a);
  EXPECT_EQ(t->metadata().size, (Coord{4, 4, 4}));
  EXPECT_EQ(t->embedding().spacing, (std::vector<double>{4, 4, 4}));
  const auto out = dense(rt, t);
  EXPECT_TRUE(std::all_of(out.begin(), out.end(), [](double x) { return x == 0.0; }));
}

TEST(ConstTableTest, MatchesPerChunkScan) {
  Runtime rt(small_config());
  const Coord size{18, 16, 13};
  const Coord chunk{4, 4, 4};
  std::vector<float> v(elements(size), 0.0f);
  v[5] = 1.0f;  // chunk (0, 0, 1)
  // Chunk (2, 1, 0) uniform at 7.
  for (std::uint64_t z = 8; z < 12; ++z)
    for (std::uint64_t y = 4; y < 8; ++y)
      for (std::uint64_t x = 0; x < 4; ++x) v[(z * 16 + y) * 13 + x] = 7.0f;
  // Border chunk (4, 3, 3) varies only inside its logical region.
  v[(17 * 16 + 15) * 13 + 12] = 2.0f;
  auto a = f32_array(v, size, chunk);
  const auto out = dense(rt, const_chunk_table(a));
  const Coord grid{5, 4, 4};
  for (const Coord& h : positions_in(Region{{0, 0, 0}, grid})) {
    std::set<float> seen;
    for (const Coord& g : positions_in(chunk_logical_region(TensorMetaData(size, chunk, DataType::f32()), h)))
      seen.insert(v[(g[0] * 16 + g[1]) * 13 + g[2]]);
    const double got = out[(h[0] * 4 + h[1]) * 4 + h[2]];
    if (seen.size() == 1)
      EXPECT_EQ(got, *seen.begin()) << to_string(h);
    else
      EXPECT_TRUE(std::isnan(got)) << to_string(h);
  }
  EXPECT_TRUE(std::isnan(out[1]));
  EXPECT_TRUE(std::isnan(out.back()));
  EXPECT_EQ(out[(2 * 4 + 1) * 4 + 0], 7.0);
}

TEST(ConstTableTest, IntegerSentinelIsTypeMaximum) {
  Runtime rt(small_config());
  std::vector<std::byte> bytes(8 * 8, std::byte{3});
  bytes[0] = std::byte{4};
  auto a = source_from_array(bytes, TensorMetaData({8, 8}, {4, 4}, DataType::u8()), EmbeddingData::unit(2));
  EXPECT_EQ(dense(rt, const_chunk_table(a)), (std::vector<double>{255, 3, 3, 3}));
  EXPECT_TRUE(is_const_sentinel(const_sentinel(ScalarKind::I16), ScalarKind::I16));
  EXPECT_EQ(const_sentinel(ScalarKind::U16), 65535.0);
}

TEST(ConstTableTest, LargeGridIsChunked) {
  Runtime rt(small_config());
  auto rec = std::make_shared<ChunkRecorder>();
  auto src = recorded_source({200, 200}, {2, 2}, rec);
  auto t = const_chunk_table(src);
  EXPECT_EQ(t->metadata().size, (Coord{100, 100}));
  EXPECT_EQ(t->metadata().chunk_size, (Coord{64, 64}));
  EXPECT_EQ(t->metadata().num_chunks(), 4u);
  const auto one = rt.resolve_one(t, {1, 1});
  // Only the input chunks under table chunk (1, 1) are generated.
  EXPECT_EQ(rec->chunks.size(), 36u * 36u);
  EXPECT_EQ(one.data.size(), 64u * 64u * 4u);
}

TEST(ConstTableTest, KnownUniformInputSkipsReading) {
  Runtime rt(small_config());
  auto src = constant_source(5, TensorMetaData({1u << 20, 1u << 20, 1u << 20}, {128, 128, 128}, DataType::u8()),
                             EmbeddingData::unit(3));
  auto t = const_chunk_table(src);
  EXPECT_EQ(t->metadata().chunk_size, (Coord{16, 16, 16}));
  const auto c = rt.resolve_one(t, {3, 7, 1});
  EXPECT_TRUE(std::all_of(c.data.begin(), c.data.end(), [](std::byte b) { return b == std::byte{5}; }));
  EXPECT_EQ(rt.stats().commits(*src), 0u);
}

}  // namespace
