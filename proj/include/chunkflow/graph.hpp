// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "chunkflow/chunk_model.hpp"
#include "chunkflow/store.hpp"
#include "chunkflow/task.hpp"

namespace chunkflow {

class Operator;
class TaskContext;
using OperatorPtr = std::shared_ptr<const Operator>;

// Immutable compute-graph node: a source or derived tensor. The id covers the kind, the
// canonical parameter bytes (which include the output element type) and the input ids.
class Operator : public std::enable_shared_from_this<Operator> {
 public:
  virtual ~Operator() = default;

  const OperatorId& id() const { return id_; }
  const std::string& kind() const { return kind_; }
  const TensorMetaData& metadata() const { return md_; }
  const EmbeddingData& embedding() const { return embedding_; }
  const std::vector<OperatorPtr>& inputs() const { return inputs_; }
  bool has_input(const Operator& node) const;
  // "kind#0123abcd", used in diagnostics and statistics.
  std::string label() const { return kind_ + "#" + id_.value.short_hex(); }

  // Where this node's chunks are computed regardless of the requested location.
  const std::optional<Location>& location_override() const { return location_; }
  // Same node (same id) annotated with a location override.
  OperatorPtr at_location(Location loc) const;

  // Produces every chunk position of `positions` via ctx.commit, or throws.
  virtual Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const = 0;

  // Upper bound on positions per task; 0 uses the engine default.
  virtual std::size_t max_batch() const { return 0; }

  // Value of every element when the operator is known to be uniform without computing it.
  virtual std::optional<double> known_uniform() const { return std::nullopt; }

  OperatorPtr ptr() const { return shared_from_this(); }

 protected:
  Operator(std::string kind, const std::vector<std::byte>& params, std::vector<OperatorPtr> inputs,
           TensorMetaData md, EmbeddingData embedding);
  Operator(const Operator&) = default;

  virtual std::shared_ptr<Operator> clone() const = 0;

 private:
  OperatorId id_;
  std::string kind_;
  TensorMetaData md_;
  EmbeddingData embedding_;
  std::vector<OperatorPtr> inputs_;
  std::optional<Location> location_;
};

// Adds clone() for a concrete operator type.
template <class Derived>
class OperatorBase : public Operator {
 protected:
  using Operator::Operator;
  std::shared_ptr<Operator> clone() const override {
    return std::make_shared<Derived>(static_cast<const Derived&>(*this));
  }
};

// Static view of the graph reachable from one node.
class ComputeGraph {
 public:
  explicit ComputeGraph(OperatorPtr root);

  const OperatorPtr& root() const { return root_; }
  // Topological order, inputs before consumers, root last.
  const std::vector<OperatorPtr>& nodes() const { return nodes_; }
  bool contains(const OperatorId& id) const { return depth_.count(id) != 0; }
  // Longest path (in edges) from the root to the node.
  int depth(const OperatorId& id) const;

 private:
  OperatorPtr root_;
  std::vector<OperatorPtr> nodes_;
  std::unordered_map<OperatorId, int, Id128Hash> depth_;
};

}  // namespace chunkflow
