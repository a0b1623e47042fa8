// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>

#include "chunkflow/operators.hpp"

namespace chunkflow::detail {

using ChunkLookup = std::function<std::span<const std::byte>(const Coord&)>;
using ChunkKernel = std::function<void(const Coord& h, const ChunkLookup& in, std::span<std::byte> out)>;

// Writes `value` into every lane of every element of h's logical region; padding is zeroed.
void fill_uniform(const TensorMetaData& md, const Coord& h, double value, std::span<std::byte> out);

Coord shape_of(const Region& r);

// Produces each position of the batch: requests the union of deps(h) from `in`, allocates the
// outputs and runs kernel(h) for every position as a worker job. Known-uniform operators are
// filled without reading their input.
Task<> per_chunk(TaskContext& ctx, const Operator& self, OperatorPtr in, std::vector<Coord> positions,
                 std::function<std::vector<Coord>(const Coord&)> deps, ChunkKernel kernel);

}  // namespace chunkflow::detail
