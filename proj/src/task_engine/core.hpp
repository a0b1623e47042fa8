// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <list>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "chunkflow/engine.hpp"
#include "worker_pool.hpp"

namespace chunkflow::detail {

enum class TaskKind { Root, Compute, Transfer };

struct JobGroupState {
  std::size_t remaining = 0;
  std::exception_ptr error;
  TaskRecord* waiter = nullptr;
  std::optional<std::pair<std::uint32_t, std::uint64_t>> device_epoch;
};

struct Waiter {
  ChunkRequest* req;
  std::size_t slot;
  ChunkState want;
  TaskRecord* task;
};

struct InflightKey {
  ChunkId id;
  Location loc;
  friend bool operator==(const InflightKey&, const InflightKey&) = default;
};

struct InflightKeyHash {
  std::size_t operator()(const InflightKey& k) const noexcept {
    return Id128Hash{}(k.id) ^ (std::hash<Location>{}(k.loc) * 0x9E3779B97F4A7C15ull);
  }
};

struct Inflight {
  std::vector<Waiter> waiters;
  ChunkState want = ChunkState::Preview;
};

// Work waiting for admission: positions of one node to compute (or transfer) at one location.
struct QueueKey {
  OperatorId node;
  Location loc;
  bool transfer = false;
  Location from{};
  friend auto operator<=>(const QueueKey&, const QueueKey&) = default;
};

struct PendingQueue {
  OperatorPtr node;
  std::deque<std::pair<Coord, ChunkId>> items;
  std::shared_ptr<const ComputeGraph> graph;
  int depth = 0;
};

struct TaskRecord {
  TaskId id = 0;
  TaskKind kind = TaskKind::Compute;
  OperatorPtr node;
  Location loc{};
  Location from{};
  QueueKey queue;
  std::vector<Coord> batch;
  std::vector<ChunkId> batch_ids;
  std::vector<bool> committed;
  std::size_t n_committed = 0;
  ChunkState wanted = ChunkState::Final;
  int depth = 0;
  std::shared_ptr<const ComputeGraph> graph;
  std::unique_ptr<TaskContext> ctx;
  Task<> body;
  std::coroutine_handle<> resume;
  bool saw_preview = false;
  bool boosted = false;
  std::function<void(std::exception_ptr)> on_fail;  // resolve roots
};

struct PendingAlloc {
  AllocationRequest* req;
  TaskRecord* task;
};

struct StateKey {
  Id128 id;
  std::type_index type;
  friend bool operator==(const StateKey&, const StateKey&) = default;
};

struct StateKeyHash {
  std::size_t operator()(const StateKey& k) const noexcept {
    return static_cast<std::size_t>(k.id.lo()) ^ k.type.hash_code();
  }
};

class Core {
 public:
  explicit Core(EngineConfig cfg);
  ~Core();

  const EngineConfig& config() const { return cfg_; }
  StoreSet& stores() { return stores_; }
  RuntimeStats& stats() { return stats_; }
  bool on_manager() const { return std::this_thread::get_id() == manager_id_; }

  // Thread-safe: runs `f` on the manager thread.
  void post(std::function<void()> f);

  std::future<std::vector<ResolvedChunk>> start_resolve(const OperatorPtr& node,
                                                        std::vector<Coord> positions,
                                                        ResolveOptions opts);

  // Called from awaiters and TaskContext on the manager thread.
  bool submit_request(ChunkRequest& req, std::coroutine_handle<> h);
  bool try_allocate(AllocationRequest& req);
  void suspend_allocation(AllocationRequest& req, std::coroutine_handle<> h);
  void commit(TaskRecord& rec, const Coord& pos, Allocation&& a, ChunkState state);
  std::optional<Allocation> try_inplace(TaskRecord& rec, ChunkRef& ref);
  JobGroup submit_jobs(TaskRecord& rec, std::vector<std::function<void()>> jobs);
  void wait_jobs(TaskRecord& rec, const JobGroup& g, std::coroutine_handle<> h);
  void wait_barrier(TaskRecord& rec, Location loc, std::uint64_t cls, std::coroutine_handle<> h);
  EventId new_event();
  bool event_signaled(EventId e) const;
  void wait_event(TaskRecord& rec, EventId e, std::coroutine_handle<> h);
  void signal(EventId e);
  std::optional<ChunkRef> try_get(const ChunkId& id, Location loc);
  std::shared_ptr<void> state_lookup(const StateKey& key);
  void state_insert(const StateKey& key, std::shared_ptr<void> v);
  void register_reclaimer(std::weak_ptr<Reclaimer> r);
  void release(Location loc, EntryKey key);
  ChunkRef make_ref(Location loc, const EntryView& v);

  std::vector<TraceEvent> trace() const { return trace_; }
  void evict_all(Location loc);

 private:
  void loop();
  void run(TaskId id);
  void wake(TaskRecord& rec);
  TaskPriority priority_of(const TaskRecord& rec) const;
  void enqueue(const QueueKey& key, const OperatorPtr& node, const Coord& pos, const ChunkId& id,
               const std::shared_ptr<const ComputeGraph>& graph, int depth);
  void admit(const QueueKey& key);
  void admit_all();
  TaskRecord& spawn(TaskKind kind, const QueueKey& key, const OperatorPtr& node,
                    std::vector<std::pair<Coord, ChunkId>> items, int depth,
                    std::shared_ptr<const ComputeGraph> graph);
  void finish(TaskRecord& rec);
  void fail(TaskRecord& rec, std::exception_ptr err);
  void destroy(TaskRecord& rec);
  void fulfil(const InflightKey& key, const EntryView& v, const TaskRecord* producer);
  void fail_inflight(const InflightKey& key, const std::exception_ptr& err);
  void fill_slot(const Waiter& w, ChunkRef ref);
  void add_maintenance(std::function<void()> action);
  void schedule_reclamation(Location loc);
  bool reclaim(Location loc);
  bool retry_allocations(Location loc);
  void check_stalled();
  void abort_all(const std::exception_ptr& err);
  std::uint64_t completed_epoch(Location loc) const;
  std::size_t& active_count(const QueueKey& key);

  EngineConfig cfg_;
  StoreSet stores_;
  WorkerPool pool_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> inbox_;
  bool stop_ = false;
  std::thread manager_;
  std::atomic<std::thread::id> manager_id_;

  // Manager-thread state.
  TaskId next_id_ = 1;
  TaskGraph graph_;
  std::unordered_map<TaskId, std::unique_ptr<TaskRecord>> tasks_;
  std::map<TaskId, std::function<void()>> maintenance_;
  std::unordered_map<InflightKey, Inflight, InflightKeyHash> inflight_;
  std::map<QueueKey, PendingQueue> queues_;
  std::map<std::pair<OperatorId, bool>, std::size_t> active_;
  std::map<Location, std::list<PendingAlloc>> pending_allocs_;
  std::set<Location> reclaim_queued_;
  std::map<std::pair<Location, std::uint64_t>, std::vector<TaskRecord*>> barriers_;
  struct Event {
    bool signaled = false;
    std::vector<TaskRecord*> waiters;
  };
  std::unordered_map<EventId, Event> events_;
  EventId next_event_ = 1;
  std::size_t jobs_outstanding_ = 0;
  struct DeviceEpochs {
    std::uint64_t submitted = 0;
    std::multiset<std::uint64_t> outstanding;
  };
  std::vector<DeviceEpochs> epochs_;
  std::unordered_map<StateKey, std::pair<std::shared_ptr<void>, std::uint64_t>, StateKeyHash> state_;
  std::uint64_t state_tick_ = 0;
  std::vector<std::weak_ptr<Reclaimer>> reclaimers_;
  bool running_task_ = false;
  std::vector<TraceEvent> trace_;
  RuntimeStats stats_;
};

}  // namespace chunkflow::detail
