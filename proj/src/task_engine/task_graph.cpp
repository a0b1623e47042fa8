// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/engine.hpp"

namespace chunkflow {

bool TaskGraph::higher(const TaskPriority& a, TaskId ida, const TaskPriority& b, TaskId idb) {
  if (a.cls != b.cls) return a.cls > b.cls;
  if (a.progress != b.progress) return a.progress > b.progress;
  if (a.depth != b.depth) return a.depth > b.depth;
  return ida < idb;
}

void TaskGraph::add(TaskId id, TaskPriority p, bool runnable) {
  tasks_[id] = Rec{p, runnable};
  if (runnable) runnable_.insert(id);
}

void TaskGraph::update(TaskId id, TaskPriority p) { tasks_.at(id).priority = p; }

void TaskGraph::set_runnable(TaskId id, bool runnable) {
  tasks_.at(id).runnable = runnable;
  if (runnable) {
    runnable_.insert(id);
  } else {
    runnable_.erase(id);
  }
}

void TaskGraph::remove(TaskId id) {
  tasks_.erase(id);
  runnable_.erase(id);
}

std::optional<TaskId> TaskGraph::schedule_next() const {
  std::optional<TaskId> best;
  const TaskPriority* bp = nullptr;
  for (TaskId id : runnable_) {
    const TaskPriority& p = tasks_.at(id).priority;
    if (!best || higher(p, id, *bp, *best)) {
      best = id;
      bp = &p;
    }
  }
  return best;
}

std::optional<PriorityClass> TaskGraph::best_runnable_class() const {
  std::optional<PriorityClass> best;
  for (TaskId id : runnable_) {
    const PriorityClass c = tasks_.at(id).priority.cls;
    if (!best || c > *best) best = c;
  }
  return best;
}

}  // namespace chunkflow
