// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/graph.hpp"

#include <algorithm>
#include <functional>

namespace chunkflow {

Operator::Operator(std::string kind, const std::vector<std::byte>& params,
                   std::vector<OperatorPtr> inputs, TensorMetaData md, EmbeddingData embedding)
    : kind_(std::move(kind)), md_(std::move(md)), embedding_(std::move(embedding)),
      inputs_(std::move(inputs)) {
  md_.validate();
  embedding_.validate(md_);
  std::vector<OperatorId> ids;
  ids.reserve(inputs_.size());
  for (const auto& in : inputs_) {
    if (!in) throw InvalidArgument(kind_ + ": null input");
    ids.push_back(in->id());
  }
  // The element type and chunking are part of every node's identity.
  ParamWriter w;
  w.bytes(params).coord(md_.size).coord(md_.chunk_size).dtype(md_.dtype).reals(embedding_.spacing);
  id_ = operator_id(kind_, w.data(), ids);
}

bool Operator::has_input(const Operator& node) const {
  return std::any_of(inputs_.begin(), inputs_.end(),
                     [&](const OperatorPtr& in) { return in->id() == node.id(); });
}

OperatorPtr Operator::at_location(Location loc) const {
  auto c = clone();
  c->location_ = loc;
  return c;
}

ComputeGraph::ComputeGraph(OperatorPtr root) : root_(std::move(root)) {
  if (!root_) throw InvalidArgument("compute graph root is null");
  std::unordered_map<OperatorId, int, Id128Hash> state;  // 1 visiting, 2 done
  std::function<void(const OperatorPtr&)> visit = [&](const OperatorPtr& n) {
    auto [it, fresh] = state.emplace(n->id(), 1);
    if (!fresh) {
      if (it->second == 1) throw InvalidArgument("compute graph has a cycle at " + n->label());
      return;
    }
    for (const auto& in : n->inputs()) visit(in);
    state[n->id()] = 2;
    nodes_.push_back(n);
  };
  visit(root_);
  // Longest path from the root: relax edges in reverse topological order.
  for (const auto& n : nodes_) depth_[n->id()] = -1;
  depth_[root_->id()] = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const int d = depth_[(*it)->id()];
    if (d < 0) continue;
    for (const auto& in : (*it)->inputs()) depth_[in->id()] = std::max(depth_[in->id()], d + 1);
  }
}

int ComputeGraph::depth(const OperatorId& id) const {
  auto it = depth_.find(id);
  return it == depth_.end() ? -1 : it->second;
}

}  // namespace chunkflow
