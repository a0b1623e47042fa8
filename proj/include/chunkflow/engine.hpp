// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <coroutine>
#include <cstdint>
#include <exception>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <typeindex>
#include <vector>

#include "chunkflow/graph.hpp"
#include "chunkflow/store.hpp"
#include "chunkflow/task.hpp"

namespace chunkflow {

struct EngineConfig {
  std::size_t max_requests_per_task = 32;
  std::size_t max_active_tasks_per_operator = 4;
  std::size_t worker_pool_size = 0;  // 0: hardware parallelism
  StoreConfig ram{std::uint64_t{1} << 30};
  std::vector<StoreConfig> devices;
  std::optional<DiskStoreConfig> disk;
  std::size_t state_cache_entries = 4096;
  bool record_trace = false;

  void validate() const;
};

struct ResolveOptions {
  Location location = Location::ram();
  // Preview: accept the first (possibly preview) result. Final: keep refining until final.
  ChunkState want = ChunkState::Final;
};

struct ResolvedChunk {
  std::vector<std::byte> data;
  ChunkState state = ChunkState::Final;
};

// Ordered by priority: data movement and allocation first, barriers and reclamation last.
enum class PriorityClass : std::uint8_t { Maintenance = 0, Compute = 1, Transfer = 2 };

using TaskId = std::uint64_t;

struct TaskPriority {
  PriorityClass cls = PriorityClass::Compute;
  double progress = 0.0;  // fraction of the task's batch already committed
  int depth = 0;          // longest path from the resolve root to the task's node
};

// Runnable-set bookkeeping and the scheduling rule: highest (class, progress, depth)
// lexicographically, ties to the lower task id.
class TaskGraph {
 public:
  void add(TaskId id, TaskPriority p, bool runnable);
  void update(TaskId id, TaskPriority p);
  void set_runnable(TaskId id, bool runnable);
  void remove(TaskId id);
  bool contains(TaskId id) const { return tasks_.count(id) != 0; }
  std::size_t size() const { return tasks_.size(); }
  std::size_t runnable_count() const { return runnable_.size(); }
  const TaskPriority& priority(TaskId id) const { return tasks_.at(id).priority; }

  std::optional<TaskId> schedule_next() const;
  std::optional<PriorityClass> best_runnable_class() const;

  static bool higher(const TaskPriority& a, TaskId ida, const TaskPriority& b, TaskId idb);

 private:
  struct Rec {
    TaskPriority priority;
    bool runnable = false;
  };
  std::map<TaskId, Rec> tasks_;
  std::set<TaskId> runnable_;
};

struct TraceEvent {
  TaskId task = 0;
  PriorityClass selected = PriorityClass::Compute;
  PriorityClass best_available = PriorityClass::Compute;
};

struct OperatorStats {
  std::string label;
  std::uint64_t tasks = 0;
  std::uint64_t commits = 0;
  std::uint64_t preview_commits = 0;
  std::uint64_t positions = 0;  // chunk positions handed to tasks
};

struct RuntimeStats {
  std::uint64_t tasks_spawned = 0;
  std::uint64_t transfer_tasks = 0;
  std::uint64_t root_tasks = 0;
  std::uint64_t manager_iterations = 0;
  std::uint64_t barrier_requests = 0;
  std::uint64_t barrier_actions = 0;
  std::uint64_t reclamations = 0;
  std::uint64_t reclaimer_calls = 0;
  std::uint64_t jobs_run = 0;
  std::uint64_t bytes_read = 0;
  std::uint64_t deadlocks = 0;
  std::uint64_t inplace_grants = 0;
  std::uint64_t inplace_denials = 0;
  std::uint64_t max_concurrent_tasks = 0;
  std::map<OperatorId, OperatorStats> operators;

  const OperatorStats& of(const Operator& op) const;
  std::uint64_t commits(const Operator& op) const { return of(op).commits; }
};

namespace detail {
class Core;
struct TaskRecord;
struct JobGroupState;
}  // namespace detail

// Reference-holding handle to a stored chunk. Releasing it (destructor or reset) returns the
// reference to the store; may happen on any thread.
class ChunkRef {
 public:
  ChunkRef() = default;
  ChunkRef(ChunkRef&& o) noexcept { *this = std::move(o); }
  ChunkRef& operator=(ChunkRef&& o) noexcept;
  ChunkRef(const ChunkRef&) = delete;
  ChunkRef& operator=(const ChunkRef&) = delete;
  ~ChunkRef() { reset(); }

  explicit operator bool() const { return core_ != nullptr; }
  std::span<const std::byte> bytes() const { return data_; }
  template <class T>
  std::span<const T> as() const {
    return {reinterpret_cast<const T*>(data_.data()), data_.size() / sizeof(T)};
  }
  ChunkState state() const { return state_; }
  Location location() const { return loc_; }
  const ChunkId& id() const { return id_; }
  std::uint64_t size() const { return size_; }
  std::uint64_t disk_offset() const { return offset_; }
  EntryKey key() const { return key_; }
  void reset();

 private:
  friend class detail::Core;
  detail::Core* core_ = nullptr;
  Location loc_{};
  EntryKey key_ = 0;
  ChunkId id_;
  ChunkState state_ = ChunkState::Final;
  std::span<const std::byte> data_;
  std::uint64_t size_ = 0;
  std::uint64_t offset_ = 0;
};

// Releases chunk references on request, e.g. page-table directories evicting bricks.
class Reclaimer {
 public:
  virtual ~Reclaimer() = default;
  // Called on the manager thread when allocation at `loc` fails after garbage collection.
  // Returns the number of payload bytes whose references were dropped.
  virtual std::uint64_t reclaim(Location loc, std::uint64_t wanted_bytes) = 0;
};

class TaskContext;

class ChunkRequest {
 public:
  bool await_ready() const noexcept { return false; }
  bool await_suspend(std::coroutine_handle<> h);
  std::vector<ChunkRef> await_resume();

 private:
  friend class TaskContext;
  friend class detail::Core;
  ChunkRequest(TaskContext* ctx, OperatorPtr node, std::vector<Coord> positions, Location loc,
               ChunkState want, bool checked)
      : ctx_(ctx), node_(std::move(node)), positions_(std::move(positions)), loc_(loc),
        want_(want), checked_(checked) {}

  TaskContext* ctx_;
  OperatorPtr node_;
  std::vector<Coord> positions_;
  Location loc_;
  ChunkState want_;
  bool checked_;
  std::vector<ChunkRef> results_;
  std::size_t remaining_ = 0;
  std::exception_ptr error_;
  std::coroutine_handle<> handle_;
};

class AllocationRequest {
 public:
  bool await_ready();
  void await_suspend(std::coroutine_handle<> h);
  Allocation await_resume();

 private:
  friend class TaskContext;
  friend class detail::Core;
  AllocationRequest(TaskContext* ctx, std::uint64_t bytes, Location loc)
      : ctx_(ctx), bytes_(bytes), loc_(loc) {}

  TaskContext* ctx_;
  std::uint64_t bytes_;
  Location loc_;
  Allocation result_;
  std::exception_ptr error_;
  std::coroutine_handle<> handle_;
};

// Jobs submitted together; waited on as a unit.
class JobGroup {
 public:
  JobGroup() = default;
  bool valid() const { return state_ != nullptr; }

 private:
  friend class TaskContext;
  friend class JobWait;
  friend class detail::Core;
  std::shared_ptr<detail::JobGroupState> state_;
};

class JobWait {
 public:
  bool await_ready() const;
  void await_suspend(std::coroutine_handle<> h);
  void await_resume();

 private:
  friend class TaskContext;
  JobWait(TaskContext* ctx, JobGroup g) : ctx_(ctx), group_(std::move(g)) {}
  TaskContext* ctx_;
  JobGroup group_;
};

class SimpleWait {
 public:
  bool await_ready() const noexcept { return ready_; }
  void await_suspend(std::coroutine_handle<> h);
  void await_resume() const noexcept {}

 private:
  friend class TaskContext;
  enum class Kind { Barrier, Event };
  SimpleWait(TaskContext* ctx, Kind kind, Location loc, std::uint64_t key, bool ready)
      : ctx_(ctx), kind_(kind), loc_(loc), key_(key), ready_(ready) {}
  TaskContext* ctx_;
  Kind kind_;
  Location loc_;
  std::uint64_t key_;
  bool ready_;
};

using EventId = std::uint64_t;

// The interface a task body uses to talk to the engine. Only valid on the manager thread,
// inside the body of the task it was handed to.
class TaskContext {
 public:
  TaskContext(detail::Core* core, detail::TaskRecord* rec) : core_(core), rec_(rec) {}

  // Null for internal (resolve root, transfer) tasks.
  const Operator* op() const;
  Location location() const;
  ChunkState wanted_state() const;
  const EngineConfig& config() const;
  std::uint64_t store_capacity(Location loc) const;

  // Chunks of an input node. Results are in request order; all are Final unless the wanted
  // state is Preview. Requesting from a node that is not an input throws GraphDisciplineError.
  ChunkRequest request(const OperatorPtr& input, std::vector<Coord> positions);
  ChunkRequest request(const OperatorPtr& input, std::vector<Coord> positions, Location loc,
                       ChunkState want);

  AllocationRequest allocate(std::uint64_t bytes) { return allocate(bytes, location()); }
  AllocationRequest allocate(std::uint64_t bytes, Location loc) { return {this, bytes, loc}; }
  // One chunk of this task's operator at the task's location.
  AllocationRequest allocate_output();

  // Publishes a chunk of this task's batch. The state is demoted to Preview if any chunk this
  // task received was a preview.
  void commit(const Coord& pos, Allocation&& payload, ChunkState state = ChunkState::Final);
  // Turns a held input reference into a writable allocation iff it is the only reference;
  // the reference is consumed on success and left untouched otherwise.
  std::optional<Allocation> try_inplace(ChunkRef& ref);

  JobGroup submit(std::vector<std::function<void()>> jobs);
  JobWait wait(JobGroup g) { return {this, std::move(g)}; }
  JobWait run(std::function<void()> job);
  JobWait run_all(std::vector<std::function<void()>> jobs) { return wait(submit(std::move(jobs))); }

  // Waits until writes at `loc` of the given visibility class are visible. Compatible waits are
  // coalesced into one barrier action.
  SimpleWait barrier(Location loc, std::uint32_t visibility_class = 0);

  EventId new_event();
  SimpleWait wait_event(EventId e);
  void signal(EventId e);

  // Final chunk already resident at `loc`, without spawning work.
  std::optional<ChunkRef> try_get(const Operator& node, const Coord& pos, Location loc);
  bool is_resident(const Operator& node, const Coord& pos, Location loc) const;

  // Per-operator state that outlives a task (e.g. cached query buffers, page tables). Kept
  // outside the chunk stores; evicted least recently used when not referenced elsewhere.
  template <class T, class F>
  std::shared_ptr<T> state(const Id128& key, F&& make) {
    auto p = state_lookup(key, typeid(T));
    if (p) return std::static_pointer_cast<T>(p);
    std::shared_ptr<T> made = make();
    state_insert(key, typeid(T), made);
    return made;
  }

  void register_reclaimer(std::weak_ptr<Reclaimer> r);
  void add_bytes_read(std::uint64_t n);
  bool saw_preview() const;
  detail::Core& core() { return *core_; }

 private:
  friend class ChunkRequest;
  friend class AllocationRequest;
  friend class JobWait;
  friend class SimpleWait;
  friend class detail::Core;
  std::shared_ptr<void> state_lookup(const Id128& key, std::type_index t);
  void state_insert(const Id128& key, std::type_index t, std::shared_ptr<void> v);

  detail::Core* core_;
  detail::TaskRecord* rec_;
};

// Owns the manager thread, the worker pool and the stores.
class Runtime {
 public:
  explicit Runtime(EngineConfig cfg = {});
  ~Runtime();
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  const EngineConfig& config() const;

  // Copies of the requested chunks. Throws ResolveError naming the failing operator.
  std::vector<ResolvedChunk> resolve(const OperatorPtr& node, std::vector<Coord> positions,
                                     ResolveOptions opts = {});
  std::future<std::vector<ResolvedChunk>> resolve_async(const OperatorPtr& node,
                                                        std::vector<Coord> positions,
                                                        ResolveOptions opts = {});
  ResolvedChunk resolve_one(const OperatorPtr& node, const Coord& pos, ResolveOptions opts = {});

  RuntimeStats stats() const;
  StoreStats store_stats(Location loc) const;
  std::vector<TraceEvent> trace() const;
  std::optional<ChunkState> stored_state(const Operator& node, const Coord& pos,
                                         Location loc = Location::ram()) const;
  // Drops every unreferenced stored chunk at `loc`.
  void evict_all(Location loc = Location::ram());

  // Runs `f` on the manager thread and waits for it.
  void invoke(std::function<void()> f) const;

 private:
  std::unique_ptr<detail::Core> core_;
};

}  // namespace chunkflow
