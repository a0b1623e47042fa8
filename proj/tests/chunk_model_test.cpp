// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <set>
#include <unordered_set>

#include "chunkflow/chunk_model.hpp"

using namespace chunkflow;

TEST(ChunkGrid, Examples) {
  EXPECT_EQ(chunk_grid_dims(TensorMetaData({10}, {4}, DataType::u8())), Coord({3}));
  EXPECT_EQ(chunk_grid_dims(TensorMetaData({4352, 4352, 4352}, {64, 64, 64}, DataType::u8())),
            Coord({68, 68, 68}));
  EXPECT_EQ(chunk_grid_dims(TensorMetaData({7, 9}, {7, 9}, DataType::f32())), Coord({1, 1}));
}

TEST(ChunkGrid, RejectsInvalidMetadata) {
  EXPECT_THROW(TensorMetaData({}, {}, DataType::f32()), InvalidArgument);
  EXPECT_THROW(TensorMetaData({0}, {4}, DataType::f32()), InvalidArgument);
  EXPECT_THROW(TensorMetaData({4}, {0}, DataType::f32()), InvalidArgument);
  EXPECT_THROW(TensorMetaData({4, 4}, {4}, DataType::f32()), ShapeMismatch);
}

TEST(GlobalToChunk, Examples) {
  TensorMetaData a({10}, {4}, DataType::f32());
  const Coord g1{9};
  auto c = global_to_chunk(a, g1);
  EXPECT_EQ(c.chunk_pos, Coord({2}));
  EXPECT_EQ(c.local_pos, Coord({1}));

  TensorMetaData b({64, 64, 64}, {64, 64, 64}, DataType::f32());
  const Coord zero{0, 0, 0};
  c = global_to_chunk(b, zero);
  EXPECT_EQ(c.chunk_pos, zero);
  EXPECT_EQ(c.local_pos, zero);

  TensorMetaData m({200, 64}, {64, 64}, DataType::f32());
  const Coord g{100, 63};
  c = global_to_chunk(m, g);
  EXPECT_EQ(c.chunk_pos, Coord({1, 0}));
  EXPECT_EQ(c.local_pos, Coord({36, 63}));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(c.chunk_pos[i] * 64 + c.local_pos[i], g[i]);
}

TEST(GlobalToChunk, OutOfBounds) {
  TensorMetaData a({10}, {4}, DataType::f32());
  const Coord g{10};
  EXPECT_THROW(global_to_chunk(a, g), InvalidCoordinate);
  const Coord wrong_rank{1, 1};
  EXPECT_THROW(global_to_chunk(a, wrong_rank), InvalidCoordinate);
}

TEST(ChunkRegion, Examples) {
  auto r = chunk_logical_region(TensorMetaData({10}, {4}, DataType::f32()), {2});
  EXPECT_EQ(r.begin, Coord({8}));
  EXPECT_EQ(r.end, Coord({10}));
  r = chunk_logical_region(TensorMetaData({8}, {4}, DataType::f32()), {0});
  EXPECT_EQ(r.begin, Coord({0}));
  EXPECT_EQ(r.end, Coord({4}));
  r = chunk_logical_region(TensorMetaData({10, 6}, {4, 4}, DataType::f32()), {2, 1});
  EXPECT_EQ(r.begin, Coord({8, 4}));
  EXPECT_EQ(r.end, Coord({10, 6}));
  EXPECT_THROW(chunk_logical_region(TensorMetaData({10}, {4}, DataType::f32()), {3}),
               InvalidCoordinate);
}

// Brute force: every element lies in exactly one chunk region, and that chunk is the one
// global_to_chunk names.
TEST(ChunkRegion, PartitionPropertyRandomShapes) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng() % 3;
    Coord S(d), C(d);
    for (std::size_t i = 0; i < d; ++i) {
      S[i] = 1 + rng() % 9;
      C[i] = 1 + rng() % 5;
    }
    TensorMetaData md(S, C, DataType::u8());
    const Coord grid = md.chunk_grid();
    std::uint64_t total = 1;
    for (auto s : S) total *= s;
    std::vector<int> cover(total, 0);
    for (std::uint64_t ci = 0; ci < md.num_chunks(); ++ci) {
      const Coord h = delinearize(grid, ci);
      const Region r = chunk_logical_region(md, h);
      ASSERT_GT(r.volume(), 0u);
      for (std::uint64_t e = 0; e < total; ++e) {
        const Coord g = delinearize(S, e);
        bool inside = true;
        for (std::size_t i = 0; i < d; ++i) inside = inside && g[i] >= r.begin[i] && g[i] < r.end[i];
        if (!inside) continue;
        ++cover[e];
        EXPECT_EQ(global_to_chunk(md, g).chunk_pos, h);
      }
    }
    for (int c : cover) ASSERT_EQ(c, 1);
  }
}

TEST(ChunkPadding, ZeroesOutsideLogicalRegion) {
  TensorMetaData md({5, 5}, {4, 4}, DataType::u8());
  std::vector<std::byte> chunk(16, std::byte{0xAB});
  zero_chunk_padding(md, {1, 1}, chunk);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      EXPECT_EQ(chunk[y * 4 + x], (y == 0 && x == 0) ? std::byte{0xAB} : std::byte{0}) << y << "," << x;
}

TEST(Linearize, RoundTrip) {
  const Coord grid{3, 5, 7};
  for (std::uint64_t i = 0; i < 105; ++i) EXPECT_EQ(linearize(grid, delinearize(grid, i)), i);
  EXPECT_EQ(linearize(grid, {1, 2, 3}), 1u * 35 + 2 * 7 + 3);
}

TEST(DataTypeNames, ParseAndPrint) {
  EXPECT_EQ(DataType::parse("u8x4"), DataType::u8(4));
  EXPECT_EQ(DataType::parse("f32"), DataType::f32());
  EXPECT_EQ(DataType::i16(2).name(), "i16x2");
  EXPECT_EQ(DataType::u8(4).size(), 4u);
  EXPECT_THROW(DataType::parse("f16"), InvalidArgument);
  EXPECT_THROW(DataType::parse("u8x5"), InvalidArgument);
}

TEST(Convert, CastRules) {
  EXPECT_EQ(convert_to<std::int16_t>(300.7), 301);
  EXPECT_EQ(convert_to<std::int16_t>(70000.0), 32767);
  EXPECT_EQ(convert_to<std::int16_t>(-70000.0), -32768);
  EXPECT_EQ(convert_to<std::uint8_t>(2.5), 2);
  EXPECT_EQ(convert_to<std::uint8_t>(3.5), 4);
  EXPECT_EQ(convert_to<std::int16_t>(-2.5), -2);
  EXPECT_EQ(convert_to<std::uint8_t>(-1.0), 0);
  EXPECT_EQ(convert_to<std::uint8_t>(std::nan("")), 0);
  for (int x = 0; x < 256; ++x) EXPECT_EQ(convert_to<float>(static_cast<double>(x)), static_cast<float>(x));
}

// Expected digests computed with Python hashlib over the documented encoding.
TEST(Ids, FrozenDigests) {
  const std::vector<std::byte> params{std::byte{1}, std::byte{2}, std::byte{3}};
  const OperatorId a = operator_id("source", params, {});
  EXPECT_EQ(a.value.hex(), "fa7f36c822d626f235a2a485ea4b4b5c");
  const std::vector<OperatorId> inputs{a, a};
  const OperatorId b = operator_id("add", {}, inputs);
  EXPECT_EQ(b.value.hex(), "b5fb3d40d4c24ce9517f8fdd9121f850");
  const Coord h0{0, 0};
  EXPECT_EQ(chunk_id(a, h0).value.hex(), "1b98df88f7fcf1a4e70f59b257ccaa1b");
  const Coord h1{3, 1, 4};
  EXPECT_EQ(chunk_id(b, h1).value.hex(), "d685c822491bf76774967538ebeca277");
  std::vector<std::byte> ten(10);
  for (std::size_t i = 0; i < ten.size(); ++i) ten[i] = static_cast<std::byte>(i);
  EXPECT_EQ(content_digest(ten).hex(), "3d1e8d57eaaf6d014c29870cf41ee260");
}

TEST(Ids, Sensitivity) {
  std::vector<std::byte> p1{std::byte{1}, std::byte{2}};
  std::vector<std::byte> p2{std::byte{1}, std::byte{3}};
  const OperatorId a = operator_id("x", p1, {});
  EXPECT_EQ(a, operator_id("x", p1, {}));
  EXPECT_NE(a, operator_id("x", p2, {}));
  EXPECT_NE(a, operator_id("y", p1, {}));
  const OperatorId b = operator_id("z", {}, {});
  const std::vector<OperatorId> ab{a, b}, ba{b, a};
  EXPECT_NE(operator_id("sub", {}, ab), operator_id("sub", {}, ba));
  const Coord h0{0, 0}, h1{0, 1};
  EXPECT_NE(chunk_id(a, h0), chunk_id(a, h1));
  EXPECT_NE(chunk_id(a, h0), chunk_id(b, h0));
}

TEST(Ids, NoCollisionsOverManyPositions) {
  const OperatorId op = operator_id("op", {}, {});
  std::unordered_set<ChunkId, Id128Hash> seen;
  std::mt19937_64 rng(1);
  std::set<Coord> positions;
  while (positions.size() < 1000000) positions.insert({rng() % 1000, rng() % 1000, rng() % 1000});
  for (const auto& h : positions) seen.insert(chunk_id(op, h));
  EXPECT_EQ(seen.size(), positions.size());
}
