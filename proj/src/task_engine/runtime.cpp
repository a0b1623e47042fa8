// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <atomic>
#include <cstring>
#include <sstream>

#include "core.hpp"

namespace chunkflow {

void EngineConfig::validate() const {
  if (max_requests_per_task == 0) throw InvalidArgument("max_requests_per_task must be positive");
  if (max_active_tasks_per_operator == 0)
    throw InvalidArgument("max_active_tasks_per_operator must be positive");
  if (ram.capacity_bytes == 0) throw InvalidArgument("RAM store capacity must be positive");
  for (const auto& d : devices)
    if (d.capacity_bytes == 0) throw InvalidArgument("device store capacity must be positive");
  auto check_gc = [](const StoreConfig& c) {
    if (!(c.gc_target_fraction > 0.0 && c.gc_target_fraction <= 1.0))
      throw InvalidArgument("gc_target_fraction must be in (0, 1]");
  };
  check_gc(ram);
  for (const auto& d : devices) check_gc(d);
  if (disk) check_gc(disk->store);
}

const OperatorStats& RuntimeStats::of(const Operator& op) const {
  static const OperatorStats empty;
  auto it = operators.find(op.id());
  return it == operators.end() ? empty : it->second;
}

ChunkRef& ChunkRef::operator=(ChunkRef&& o) noexcept {
  if (this != &o) {
    reset();
    core_ = std::exchange(o.core_, nullptr);
    loc_ = o.loc_;
    key_ = o.key_;
    id_ = o.id_;
    state_ = o.state_;
    data_ = std::exchange(o.data_, {});
    size_ = o.size_;
    offset_ = o.offset_;
  }
  return *this;
}

void ChunkRef::reset() {
  if (core_) {
    core_->release(loc_, key_);
    core_ = nullptr;
    data_ = {};
  }
}

namespace detail {

namespace {

std::string describe(const TaskRecord& rec) {
  switch (rec.kind) {
    case TaskKind::Root: return "resolve";
    case TaskKind::Compute: return rec.node->label();
    case TaskKind::Transfer:
      return "transfer of " + rec.node->label() + " from " + rec.from.name() + " to " + rec.loc.name();
  }
  return "?";
}

std::exception_ptr wrap_error(const TaskRecord& rec, std::exception_ptr err) {
  try {
    std::rethrow_exception(err);
  } catch (const ResolveError&) {
    return err;
  } catch (const std::exception& e) {
    const std::string who = rec.kind == TaskKind::Root ? "resolve" : rec.node->label();
    return std::make_exception_ptr(ResolveError(who, describe(rec) + " failed: " + e.what()));
  } catch (...) {
    const std::string who = rec.kind == TaskKind::Root ? "resolve" : rec.node->label();
    return std::make_exception_ptr(ResolveError(who, describe(rec) + " failed"));
  }
}

void copy_chunk(StoreSet& stores, const ChunkRef& src, Allocation& dst) {
  if (src.location().kind == Location::Kind::Disk) {
    stores.at(Location::disk()).file()->read(src.disk_offset(), dst.bytes());
  } else if (dst.location().kind == Location::Kind::Disk) {
    stores.at(Location::disk()).file()->write(dst.disk_offset(), src.bytes());
  } else {
    std::memcpy(dst.bytes().data(), src.bytes().data(), src.size());
  }
}

Task<> root_body(TaskContext& ctx, OperatorPtr node, std::vector<Coord> positions,
                 ResolveOptions opts,
                 std::shared_ptr<std::promise<std::vector<ResolvedChunk>>> out) {
  // Results are copied out group by group so the root never pins more than one group.
  const std::size_t group =
      ctx.config().max_requests_per_task * ctx.config().max_active_tasks_per_operator;
  std::vector<ResolvedChunk> res(positions.size());
  FileBacking* file = opts.location.kind == Location::Kind::Disk
                          ? ctx.core().stores().at(Location::disk()).file()
                          : nullptr;
  for (std::size_t first = 0; first < positions.size(); first += group) {
    const std::size_t last = std::min(positions.size(), first + group);
    std::vector<Coord> part(positions.begin() + static_cast<std::ptrdiff_t>(first),
                            positions.begin() + static_cast<std::ptrdiff_t>(last));
    std::vector<ChunkRef> refs = co_await ctx.request(node, std::move(part), opts.location, opts.want);
    std::vector<std::function<void()>> jobs;
    std::uint64_t disk_bytes = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      ResolvedChunk& r = res[first + i];
      r.state = refs[i].state();
      r.data.resize(refs[i].size());
      if (file) disk_bytes += refs[i].size();
      const ChunkRef& ref = refs[i];
      jobs.push_back([&r, &ref, file] {
        if (file) {
          file->read(ref.disk_offset(), r.data);
        } else {
          std::memcpy(r.data.data(), ref.bytes().data(), ref.size());
        }
      });
    }
    co_await ctx.run_all(std::move(jobs));
    ctx.add_bytes_read(disk_bytes);
  }
  out->set_value(std::move(res));
}

Task<> transfer_body(TaskContext& ctx, TaskRecord& rec) {
  std::vector<ChunkRef> refs = co_await ctx.request(rec.node, rec.batch, rec.from, rec.wanted);
  std::vector<Allocation> outs;
  outs.reserve(refs.size());
  for (const auto& r : refs) outs.push_back(co_await ctx.allocate(r.size(), rec.loc));
  std::vector<std::function<void()>> jobs;
  StoreSet& stores = ctx.core().stores();
  std::uint64_t disk_bytes = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (rec.from.kind == Location::Kind::Disk) disk_bytes += refs[i].size();
    jobs.push_back([&stores, &refs, &outs, i] { copy_chunk(stores, refs[i], outs[i]); });
  }
  co_await ctx.run_all(std::move(jobs));
  ctx.add_bytes_read(disk_bytes);
  for (std::size_t i = 0; i < refs.size(); ++i)
    ctx.commit(rec.batch[i], std::move(outs[i]), refs[i].state());
}

}  // namespace

Core::Core(EngineConfig cfg)
    : cfg_((cfg.validate(), std::move(cfg))),
      stores_(cfg_.ram, cfg_.devices, cfg_.disk),
      pool_(cfg_.worker_pool_size ? cfg_.worker_pool_size
                                  : std::max(1u, std::thread::hardware_concurrency())),
      epochs_(cfg_.devices.size()) {
  manager_ = std::thread([this] { loop(); });
  manager_id_ = manager_.get_id();
}

Core::~Core() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  manager_.join();
}

void Core::post(std::function<void()> f) {
  {
    std::lock_guard lock(mu_);
    inbox_.push_back(std::move(f));
  }
  cv_.notify_all();
}

void Core::loop() {
  for (;;) {
    std::deque<std::function<void()>> batch;
    {
      std::lock_guard lock(mu_);
      batch.swap(inbox_);
    }
    for (auto& f : batch) f();
    ++stats_.manager_iterations;

    if (auto id = graph_.schedule_next()) {
      run(*id);
      continue;
    }
    bool stopping;
    {
      std::lock_guard lock(mu_);
      stopping = stop_ && inbox_.empty();
      if (!inbox_.empty()) continue;
    }
    if (stopping && jobs_outstanding_ == 0) {
      abort_all(std::make_exception_ptr(Error("runtime shut down")));
      state_.clear();
      reclaimers_.clear();
      std::lock_guard lock(mu_);
      if (inbox_.empty()) return;
      continue;
    }
    if (jobs_outstanding_ == 0 && !tasks_.empty()) {
      check_stalled();
      continue;
    }
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !inbox_.empty() || (stop_ && jobs_outstanding_ == 0); });
  }
}

TaskPriority Core::priority_of(const TaskRecord& rec) const {
  TaskPriority p;
  p.cls = (rec.boosted || rec.kind == TaskKind::Transfer) ? PriorityClass::Transfer
                                                          : PriorityClass::Compute;
  p.progress = rec.batch.empty() ? 0.0
                                 : static_cast<double>(rec.n_committed) /
                                       static_cast<double>(rec.batch.size());
  p.depth = rec.depth;
  return p;
}

void Core::run(TaskId id) {
  if (cfg_.record_trace) {
    const auto best = graph_.best_runnable_class();
    trace_.push_back({id, graph_.priority(id).cls, *best});
  }
  if (auto m = maintenance_.find(id); m != maintenance_.end()) {
    auto action = std::move(m->second);
    maintenance_.erase(m);
    graph_.remove(id);
    action();
    return;
  }
  TaskRecord& rec = *tasks_.at(id);
  graph_.set_runnable(id, false);
  if (rec.boosted) {
    rec.boosted = false;
    graph_.update(id, priority_of(rec));
  }
  if (running_task_) throw std::logic_error("task bodies must not run concurrently");
  running_task_ = true;
  auto h = std::exchange(rec.resume, nullptr);
  h.resume();
  running_task_ = false;
  if (rec.body.done()) finish(rec);
}

void Core::wake(TaskRecord& rec) {
  graph_.set_runnable(rec.id, true);
  graph_.update(rec.id, priority_of(rec));
}

std::size_t& Core::active_count(const QueueKey& key) { return active_[{key.node, key.transfer}]; }

void Core::enqueue(const QueueKey& key, const OperatorPtr& node, const Coord& pos,
                   const ChunkId& id, const std::shared_ptr<const ComputeGraph>& graph, int depth) {
  PendingQueue& q = queues_[key];
  if (!q.node) {
    q.node = node;
    q.graph = graph;
    q.depth = depth;
  }
  q.items.emplace_back(pos, id);
}

void Core::admit(const QueueKey& key) {
  auto it = queues_.find(key);
  if (it == queues_.end()) return;
  PendingQueue& q = it->second;
  std::size_t batch_max = cfg_.max_requests_per_task;
  if (!key.transfer && q.node->max_batch() > 0) batch_max = std::min(batch_max, q.node->max_batch());
  while (!q.items.empty() && active_count(key) < cfg_.max_active_tasks_per_operator) {
    std::vector<std::pair<Coord, ChunkId>> items;
    while (!q.items.empty() && items.size() < batch_max) {
      items.push_back(std::move(q.items.front()));
      q.items.pop_front();
    }
    spawn(key.transfer ? TaskKind::Transfer : TaskKind::Compute, key, q.node, std::move(items),
          q.depth, q.graph);
  }
  if (q.items.empty()) queues_.erase(it);
}

void Core::admit_all() {
  std::vector<QueueKey> keys;
  for (const auto& [k, q] : queues_) keys.push_back(k);
  for (const auto& k : keys) admit(k);
}

TaskRecord& Core::spawn(TaskKind kind, const QueueKey& key, const OperatorPtr& node,
                        std::vector<std::pair<Coord, ChunkId>> items, int depth,
                        std::shared_ptr<const ComputeGraph> graph) {
  auto rec = std::make_unique<TaskRecord>();
  rec->id = next_id_++;
  rec->kind = kind;
  rec->node = node;
  rec->loc = key.loc;
  rec->from = key.from;
  rec->queue = key;
  rec->depth = depth;
  rec->graph = std::move(graph);
  rec->wanted = ChunkState::Preview;
  for (auto& [pos, id] : items) {
    auto inf = inflight_.find({id, key.loc});
    const ChunkState w = inf == inflight_.end() ? ChunkState::Final : inf->second.want;
    rec->wanted = std::max(rec->wanted, w);
    rec->batch.push_back(std::move(pos));
    rec->batch_ids.push_back(id);
  }
  rec->committed.assign(rec->batch.size(), false);
  rec->ctx = std::make_unique<TaskContext>(this, rec.get());
  rec->body = kind == TaskKind::Transfer ? transfer_body(*rec->ctx, *rec)
                                         : node->compute(*rec->ctx, rec->batch);
  rec->resume = rec->body.handle();
  graph_.add(rec->id, priority_of(*rec), true);
  ++active_count(key);

  ++stats_.tasks_spawned;
  if (kind == TaskKind::Transfer) {
    ++stats_.transfer_tasks;
  } else {
    OperatorStats& os = stats_.operators[node->id()];
    if (os.label.empty()) os.label = node->label();
    ++os.tasks;
    os.positions += rec->batch.size();
  }
  TaskRecord& ref = *rec;
  tasks_.emplace(rec->id, std::move(rec));
  stats_.max_concurrent_tasks = std::max<std::uint64_t>(stats_.max_concurrent_tasks, tasks_.size());
  return ref;
}

std::future<std::vector<ResolvedChunk>> Core::start_resolve(const OperatorPtr& node,
                                                            std::vector<Coord> positions,
                                                            ResolveOptions opts) {
  auto prom = std::make_shared<std::promise<std::vector<ResolvedChunk>>>();
  auto fut = prom->get_future();
  if (!node) throw InvalidArgument("resolve of a null node");
  post([this, node, positions = std::move(positions), opts, prom]() mutable {
    try {
      if (!stores_.has(opts.location))
        throw InvalidArgument("no store at location " + opts.location.name());
      auto rec = std::make_unique<TaskRecord>();
      rec->id = next_id_++;
      rec->kind = TaskKind::Root;
      rec->node = node;
      rec->loc = opts.location;
      rec->wanted = opts.want;
      rec->graph = std::make_shared<const ComputeGraph>(node);
      rec->depth = 0;
      rec->on_fail = [prom](std::exception_ptr e) { prom->set_exception(e); };
      rec->ctx = std::make_unique<TaskContext>(this, rec.get());
      rec->body = root_body(*rec->ctx, node, std::move(positions), opts, prom);
      rec->resume = rec->body.handle();
      graph_.add(rec->id, priority_of(*rec), true);
      ++stats_.root_tasks;
      tasks_.emplace(rec->id, std::move(rec));
    } catch (...) {
      prom->set_exception(std::current_exception());
    }
  });
  return fut;
}

bool Core::submit_request(ChunkRequest& req, std::coroutine_handle<> h) {
  TaskRecord& rec = *req.ctx_->rec_;
  const std::size_t n = req.positions_.size();
  req.results_.clear();
  req.results_.resize(n);
  req.remaining_ = 0;
  if (const auto& pin = req.node_->location_override(); pin && !stores_.has(*pin))
    throw InvalidArgument(req.node_->label() + " is pinned to missing location " + pin->name());
  std::set<QueueKey> touched;
  for (std::size_t i = 0; i < n; ++i) {
    const Coord& pos = req.positions_[i];
    const ChunkId id = chunk_id(req.node_->id(), pos);
    // Preview entries never satisfy a new request: re-querying a preview triggers refinement.
    LookupResult r = stores_.lookup(id, req.loc_, ChunkState::Final);
    if (r.kind == LookupResult::Kind::Hit) {
      req.results_[i] = make_ref(req.loc_, r.entry);
      continue;
    }
    ++req.remaining_;
    auto [it, fresh] = inflight_.try_emplace(InflightKey{id, req.loc_});
    it->second.waiters.push_back({&req, i, req.want_, &rec});
    it->second.want = std::max(it->second.want, req.want_);
    if (!fresh) continue;
    int depth = rec.graph ? rec.graph->depth(req.node_->id()) : -1;
    if (depth < 0) depth = rec.depth + 1;
    QueueKey key{req.node_->id(), req.loc_, false, {}};
    if (r.kind == LookupResult::Kind::ElsewhereAt) {
      key.transfer = true;
      key.from = r.where;
    } else {
      Location cloc = req.loc_.kind == Location::Kind::Disk ? Location::ram() : req.loc_;
      if (req.node_->location_override()) cloc = *req.node_->location_override();
      if (cloc != req.loc_) {
        key.transfer = true;
        key.from = cloc;
      }
    }
    enqueue(key, req.node_, pos, id, rec.graph, depth);
    touched.insert(key);
  }
  if (req.remaining_ == 0) return false;
  req.handle_ = h;
  rec.resume = h;
  for (const auto& k : touched) admit(k);
  return true;
}

ChunkRef Core::make_ref(Location loc, const EntryView& v) {
  ChunkRef r;
  r.core_ = this;
  r.loc_ = loc;
  r.key_ = v.key;
  r.id_ = v.id;
  r.state_ = v.state;
  r.data_ = v.data;
  r.size_ = v.size_bytes;
  r.offset_ = v.disk_offset;
  return r;
}

void Core::fill_slot(const Waiter& w, ChunkRef ref) {
  w.req->results_[w.slot] = std::move(ref);
  if (--w.req->remaining_ == 0) wake(*w.task);
}

void Core::fulfil(const InflightKey& key, const EntryView& v, const TaskRecord* producer) {
  auto it = inflight_.find(key);
  if (it == inflight_.end()) return;
  std::vector<Waiter> waiters = std::move(it->second.waiters);
  std::vector<Waiter> keep;
  Store& store = stores_.at(key.loc);
  for (const Waiter& w : waiters) {
    if (v.state >= w.want) {
      store.acquire(v.key);
      fill_slot(w, make_ref(key.loc, v));
    } else {
      keep.push_back(w);
    }
  }
  if (keep.empty()) {
    inflight_.erase(it);
    return;
  }
  // A preview was produced but some waiters need the final result: schedule refinement.
  it->second.waiters = std::move(keep);
  it->second.want = ChunkState::Final;
  if (producer) {
    const auto idx = static_cast<std::size_t>(
        std::find(producer->batch_ids.begin(), producer->batch_ids.end(), key.id) -
        producer->batch_ids.begin());
    enqueue(producer->queue, producer->node, producer->batch[idx], key.id, producer->graph,
            producer->depth);
    admit(producer->queue);
  }
}

void Core::fail_inflight(const InflightKey& key, const std::exception_ptr& err) {
  auto it = inflight_.find(key);
  if (it == inflight_.end()) return;
  std::vector<Waiter> waiters = std::move(it->second.waiters);
  inflight_.erase(it);
  for (const Waiter& w : waiters) {
    if (!w.req->error_) w.req->error_ = err;
    if (--w.req->remaining_ == 0) wake(*w.task);
  }
}

void Core::commit(TaskRecord& rec, const Coord& pos, Allocation&& a, ChunkState state) {
  if (rec.kind == TaskKind::Root) throw GraphDisciplineError("resolve roots cannot commit chunks");
  const auto it = std::find(rec.batch.begin(), rec.batch.end(), pos);
  if (it == rec.batch.end())
    throw GraphDisciplineError(rec.node->label() + " committed chunk " + to_string(pos) +
                               " outside its batch");
  const auto idx = static_cast<std::size_t>(it - rec.batch.begin());
  if (rec.committed[idx])
    throw GraphDisciplineError(rec.node->label() + " committed chunk " + to_string(pos) + " twice");
  if (!a.valid()) throw InvalidArgument("commit of an empty allocation");
  if (a.location() != rec.loc)
    throw InvalidArgument("commit of an allocation at " + a.location().name() + " by a task at " +
                          rec.loc.name());
  if (a.size() != rec.node->metadata().chunk_bytes())
    throw ShapeMismatch(rec.node->label() + " committed " + std::to_string(a.size()) +
                        " bytes, expected " + std::to_string(rec.node->metadata().chunk_bytes()));
  if (state == ChunkState::InFlight) throw InvalidArgument("cannot commit an in-flight chunk");
  if (rec.saw_preview) state = ChunkState::Preview;
  const ChunkId id = rec.batch_ids[idx];
  EntryView v = stores_.at(rec.loc).insert(id, std::move(a), state);
  rec.committed[idx] = true;
  ++rec.n_committed;
  graph_.update(rec.id, priority_of(rec));
  if (rec.kind == TaskKind::Compute) {
    OperatorStats& os = stats_.operators[rec.node->id()];
    ++os.commits;
    if (state == ChunkState::Preview) ++os.preview_commits;
  }
  fulfil({id, rec.loc}, v, &rec);
}

std::optional<Allocation> Core::try_inplace(TaskRecord& rec, ChunkRef& ref) {
  if (!ref || ref.core_ != this || ref.loc_ != rec.loc) {
    ++stats_.inplace_denials;
    return std::nullopt;
  }
  auto a = stores_.at(ref.loc_).try_replace_inplace(ref.key_);
  if (!a) {
    ++stats_.inplace_denials;
    return std::nullopt;
  }
  ++stats_.inplace_grants;
  ref.core_ = nullptr;
  ref.data_ = {};
  return a;
}

bool Core::try_allocate(AllocationRequest& req) {
  if (!stores_.has(req.loc_)) {
    req.error_ = std::make_exception_ptr(InvalidArgument("no store at " + req.loc_.name()));
    return true;
  }
  AllocResult r = stores_.at(req.loc_).allocate(req.bytes_);
  switch (r.status) {
    case AllocStatus::Ok:
      req.result_ = std::move(r.allocation);
      return true;
    case AllocStatus::TooLarge: {
      const TaskRecord& rec = *req.ctx_->rec_;
      const std::string who = rec.kind == TaskKind::Root ? "resolve" : rec.node->label();
      req.error_ = std::make_exception_ptr(MemoryBudgetExhausted(
          who, "memory budget exhausted: " + who + " needs a " + std::to_string(req.bytes_) +
                   "-byte chunk but the " + req.loc_.name() + " store holds only " +
                   std::to_string(stores_.at(req.loc_).config().capacity_bytes) + " bytes"));
      return true;
    }
    case AllocStatus::ReclamationNeeded: return false;
  }
  return false;
}

void Core::suspend_allocation(AllocationRequest& req, std::coroutine_handle<> h) {
  TaskRecord& rec = *req.ctx_->rec_;
  req.handle_ = h;
  rec.resume = h;
  pending_allocs_[req.loc_].push_back({&req, &rec});
  schedule_reclamation(req.loc_);
}

void Core::add_maintenance(std::function<void()> action) {
  const TaskId id = next_id_++;
  maintenance_.emplace(id, std::move(action));
  graph_.add(id, TaskPriority{PriorityClass::Maintenance, 0.0, 0}, true);
}

void Core::schedule_reclamation(Location loc) {
  if (!reclaim_queued_.insert(loc).second) return;
  add_maintenance([this, loc] {
    reclaim_queued_.erase(loc);
    reclaim(loc);
  });
}

std::uint64_t Core::completed_epoch(Location loc) const {
  if (!loc.is_device()) return UINT64_MAX;
  const DeviceEpochs& e = epochs_.at(loc.index);
  return e.outstanding.empty() ? e.submitted : *e.outstanding.begin() - 1;
}

bool Core::retry_allocations(Location loc) {
  auto it = pending_allocs_.find(loc);
  if (it == pending_allocs_.end() || it->second.empty()) return false;
  auto& list = it->second;
  std::vector<std::list<PendingAlloc>::iterator> order;
  for (auto i = list.begin(); i != list.end(); ++i) order.push_back(i);
  std::sort(order.begin(), order.end(), [this](auto a, auto b) {
    return TaskGraph::higher(priority_of(*a->task), a->task->id, priority_of(*b->task), b->task->id);
  });
  bool any = false;
  for (auto i : order) {
    if (!try_allocate(*i->req)) continue;
    TaskRecord& rec = *i->task;
    list.erase(i);
    rec.boosted = true;
    wake(rec);
    any = true;
  }
  return any;
}

bool Core::reclaim(Location loc) {
  ++stats_.reclamations;
  bool any = false;
  Store& store = stores_.at(loc);
  for (;;) {
    any |= retry_allocations(loc);
    auto it = pending_allocs_.find(loc);
    if (it == pending_allocs_.end() || it->second.empty()) break;
    if (store.garbage_collect(completed_epoch(loc)) > 0) continue;
    const std::uint64_t wanted = it->second.front().req->bytes_;
    std::uint64_t got = 0;
    std::erase_if(reclaimers_, [](const auto& w) { return w.expired(); });
    auto live = reclaimers_;
    for (const auto& w : live) {
      if (auto r = w.lock()) {
        ++stats_.reclaimer_calls;
        got += r->reclaim(loc, wanted);
      }
    }
    if (got > 0) continue;
    break;
  }
  return any;
}

void Core::check_stalled() {
  bool progressed = false;
  std::vector<Location> locs;
  for (const auto& [loc, list] : pending_allocs_)
    if (!list.empty()) locs.push_back(loc);
  for (Location loc : locs) progressed |= reclaim(loc);
  if (progressed || graph_.runnable_count() > 0) return;

  ++stats_.deadlocks;
  std::string node = "resolve";
  std::ostringstream msg;
  bool found = false;
  for (const auto& [loc, list] : pending_allocs_) {
    if (list.empty()) continue;
    const PendingAlloc& p = list.front();
    node = p.task->kind == TaskKind::Root ? "resolve" : p.task->node->label();
    const StoreStats s = stores_.at(loc).stats();
    msg << "memory budget exhausted: " << describe(*p.task) << " waits for "
        << p.req->bytes_ << " bytes at " << loc.name() << " but all " << s.capacity
        << " bytes of capacity are held by referenced chunks (" << s.used << " in use, "
        << list.size() << " allocations waiting); increase the store capacity";
    found = true;
    break;
  }
  if (!found) {
    const TaskRecord& any = *tasks_.begin()->second;
    node = any.kind == TaskKind::Root ? "resolve" : any.node->label();
    msg << "engine stalled: no task can make progress (" << tasks_.size()
        << " tasks waiting, e.g. " << describe(any) << ")";
  }
  abort_all(std::make_exception_ptr(MemoryBudgetExhausted(node, msg.str())));
}

void Core::abort_all(const std::exception_ptr& err) {
  inflight_.clear();
  queues_.clear();
  pending_allocs_.clear();
  barriers_.clear();
  for (auto& [id, ev] : events_) ev.waiters.clear();
  for (auto& [id, action] : maintenance_) graph_.remove(id);
  maintenance_.clear();
  reclaim_queued_.clear();
  std::vector<std::unique_ptr<TaskRecord>> all;
  for (auto& [id, rec] : tasks_) {
    graph_.remove(id);
    all.push_back(std::move(rec));
  }
  tasks_.clear();
  active_.clear();
  for (auto& rec : all)
    if (rec->on_fail) rec->on_fail(err);
  // Destroying the frames releases every chunk reference and allocation they hold.
  all.clear();
}

void Core::finish(TaskRecord& rec) {
  if (auto e = rec.body.error()) {
    fail(rec, e);
    return;
  }
  if (rec.kind != TaskKind::Root && rec.n_committed < rec.batch.size()) {
    std::string missing;
    for (std::size_t i = 0; i < rec.batch.size(); ++i)
      if (!rec.committed[i]) {
        missing = to_string(rec.batch[i]);
        break;
      }
    fail(rec, std::make_exception_ptr(Error("finished without producing chunk " + missing)));
    return;
  }
  destroy(rec);
}

void Core::fail(TaskRecord& rec, std::exception_ptr err) {
  err = wrap_error(rec, err);
  for (std::size_t i = 0; i < rec.batch.size(); ++i)
    if (!rec.committed[i]) fail_inflight({rec.batch_ids[i], rec.loc}, err);
  if (rec.on_fail) rec.on_fail(err);
  destroy(rec);
}

void Core::destroy(TaskRecord& rec) {
  const TaskId id = rec.id;
  const bool counted = rec.kind != TaskKind::Root;
  const QueueKey key = rec.queue;
  graph_.remove(id);
  auto owned = std::move(tasks_.at(id));
  tasks_.erase(id);
  if (counted) --active_count(key);
  owned.reset();
  if (counted) {
    std::vector<QueueKey> same;
    for (const auto& [k, q] : queues_)
      if (k.node == key.node && k.transfer == key.transfer) same.push_back(k);
    for (const auto& k : same) admit(k);
  }
}

JobGroup Core::submit_jobs(TaskRecord& rec, std::vector<std::function<void()>> jobs) {
  JobGroup g;
  g.state_ = std::make_shared<JobGroupState>();
  g.state_->remaining = jobs.size();
  if (jobs.empty()) return g;
  if (rec.loc.is_device()) {
    DeviceEpochs& e = epochs_.at(rec.loc.index);
    ++e.submitted;
    e.outstanding.insert(e.submitted);
    g.state_->device_epoch = std::make_pair(rec.loc.index, e.submitted);
  }
  jobs_outstanding_ += jobs.size();
  for (auto& fn : jobs) {
    pool_.post([this, st = g.state_, fn = std::move(fn)]() mutable {
      std::exception_ptr ep;
      try {
        fn();
      } catch (...) {
        ep = std::current_exception();
      }
      fn = nullptr;
      post([this, st, ep] {
        --jobs_outstanding_;
        ++stats_.jobs_run;
        if (ep && !st->error) st->error = ep;
        if (--st->remaining > 0) return;
        if (st->device_epoch) {
          auto [dev, epoch] = *st->device_epoch;
          auto& out = epochs_.at(dev).outstanding;
          out.erase(out.find(epoch));
          if (pending_allocs_.count(Location::device(dev))) schedule_reclamation(Location::device(dev));
        }
        if (TaskRecord* t = std::exchange(st->waiter, nullptr)) wake(*t);
      });
    });
  }
  return g;
}

void Core::wait_jobs(TaskRecord& rec, const JobGroup& g, std::coroutine_handle<> h) {
  g.state_->waiter = &rec;
  rec.resume = h;
}

void Core::wait_barrier(TaskRecord& rec, Location loc, std::uint64_t cls, std::coroutine_handle<> h) {
  ++stats_.barrier_requests;
  rec.resume = h;
  const auto key = std::make_pair(loc, cls);
  auto [it, fresh] = barriers_.try_emplace(key);
  it->second.push_back(&rec);
  if (!fresh) return;
  add_maintenance([this, key] {
    auto node = barriers_.extract(key);
    if (node.empty()) return;
    std::atomic_thread_fence(std::memory_order_seq_cst);
    ++stats_.barrier_actions;
    for (TaskRecord* t : node.mapped()) wake(*t);
  });
}

EventId Core::new_event() {
  const EventId id = next_event_++;
  events_[id];
  return id;
}

bool Core::event_signaled(EventId e) const {
  auto it = events_.find(e);
  return it != events_.end() && it->second.signaled;
}

void Core::wait_event(TaskRecord& rec, EventId e, std::coroutine_handle<> h) {
  rec.resume = h;
  events_[e].waiters.push_back(&rec);
}

void Core::signal(EventId e) {
  Event& ev = events_[e];
  ev.signaled = true;
  for (TaskRecord* t : std::exchange(ev.waiters, {})) wake(*t);
}

std::optional<ChunkRef> Core::try_get(const ChunkId& id, Location loc) {
  if (!stores_.has(loc)) return std::nullopt;
  if (auto v = stores_.at(loc).lookup(id, ChunkState::Final)) return make_ref(loc, *v);
  return std::nullopt;
}

std::shared_ptr<void> Core::state_lookup(const StateKey& key) {
  auto it = state_.find(key);
  if (it == state_.end()) return nullptr;
  it->second.second = ++state_tick_;
  return it->second.first;
}

void Core::state_insert(const StateKey& key, std::shared_ptr<void> v) {
  state_[key] = {std::move(v), ++state_tick_};
  if (state_.size() <= cfg_.state_cache_entries) return;
  std::vector<std::pair<std::uint64_t, StateKey>> idle;
  for (const auto& [k, e] : state_)
    if (e.first.use_count() == 1) idle.emplace_back(e.second, k);
  std::sort(idle.begin(), idle.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [tick, k] : idle) {
    if (state_.size() <= cfg_.state_cache_entries) break;
    state_.erase(k);
  }
}

void Core::register_reclaimer(std::weak_ptr<Reclaimer> r) { reclaimers_.push_back(std::move(r)); }

void Core::release(Location loc, EntryKey key) {
  if (!on_manager()) {
    post([this, loc, key] { release(loc, key); });
    return;
  }
  const std::uint64_t epoch = loc.is_device() ? epochs_.at(loc.index).submitted : 0;
  Store& store = stores_.at(loc);
  store.release(key, epoch);
  if (auto it = pending_allocs_.find(loc); it != pending_allocs_.end() && !it->second.empty())
    schedule_reclamation(loc);
}

void Core::evict_all(Location loc) {
  Store& s = stores_.at(loc);
  while (s.garbage_collect(completed_epoch(loc)) > 0) {
  }
}

}  // namespace detail

// Awaiters and TaskContext.

bool ChunkRequest::await_suspend(std::coroutine_handle<> h) {
  return ctx_->core_->submit_request(*this, h);
}

std::vector<ChunkRef> ChunkRequest::await_resume() {
  if (error_) {
    results_.clear();
    std::rethrow_exception(error_);
  }
  for (const auto& r : results_)
    if (r.state() == ChunkState::Preview) ctx_->rec_->saw_preview = true;
  return std::move(results_);
}

bool AllocationRequest::await_ready() { return ctx_->core_->try_allocate(*this); }

void AllocationRequest::await_suspend(std::coroutine_handle<> h) {
  ctx_->core_->suspend_allocation(*this, h);
}

Allocation AllocationRequest::await_resume() {
  if (error_) std::rethrow_exception(error_);
  return std::move(result_);
}

bool JobWait::await_ready() const { return !group_.state_ || group_.state_->remaining == 0; }

void JobWait::await_suspend(std::coroutine_handle<> h) {
  ctx_->core_->wait_jobs(*ctx_->rec_, group_, h);
}

void JobWait::await_resume() {
  if (group_.state_ && group_.state_->error) std::rethrow_exception(group_.state_->error);
}

void SimpleWait::await_suspend(std::coroutine_handle<> h) {
  if (kind_ == Kind::Barrier) {
    ctx_->core_->wait_barrier(*ctx_->rec_, loc_, key_, h);
  } else {
    ctx_->core_->wait_event(*ctx_->rec_, key_, h);
  }
}

const Operator* TaskContext::op() const {
  return rec_->kind == detail::TaskKind::Compute ? rec_->node.get() : nullptr;
}

Location TaskContext::location() const { return rec_->loc; }
ChunkState TaskContext::wanted_state() const { return rec_->wanted; }
const EngineConfig& TaskContext::config() const { return core_->config(); }

std::uint64_t TaskContext::store_capacity(Location loc) const {
  return core_->stores().at(loc).config().capacity_bytes;
}

ChunkRequest TaskContext::request(const OperatorPtr& input, std::vector<Coord> positions) {
  return request(input, std::move(positions), location(), wanted_state());
}

ChunkRequest TaskContext::request(const OperatorPtr& input, std::vector<Coord> positions,
                                  Location loc, ChunkState want) {
  if (!input) throw InvalidArgument("request from a null node");
  if (rec_->kind == detail::TaskKind::Compute && !rec_->node->has_input(*input))
    throw GraphDisciplineError(rec_->node->label() + " requested chunks of " + input->label() +
                               ", which is not one of its inputs");
  if (!core_->stores().has(loc)) throw InvalidArgument("no store at location " + loc.name());
  if (want == ChunkState::InFlight) want = ChunkState::Preview;
  for (const auto& p : positions)
    if (!input->metadata().contains_chunk(p))
      throw InvalidCoordinate("chunk " + to_string(p) + " outside the chunk grid " +
                              to_string(input->metadata().chunk_grid()) + " of " + input->label());
  return ChunkRequest(this, input, std::move(positions), loc, want, true);
}

AllocationRequest TaskContext::allocate_output() {
  return allocate(rec_->node->metadata().chunk_bytes(), location());
}

void TaskContext::commit(const Coord& pos, Allocation&& payload, ChunkState state) {
  core_->commit(*rec_, pos, std::move(payload), state);
}

std::optional<Allocation> TaskContext::try_inplace(ChunkRef& ref) {
  return core_->try_inplace(*rec_, ref);
}

JobGroup TaskContext::submit(std::vector<std::function<void()>> jobs) {
  return core_->submit_jobs(*rec_, std::move(jobs));
}

JobWait TaskContext::run(std::function<void()> job) {
  std::vector<std::function<void()>> jobs;
  jobs.push_back(std::move(job));
  return run_all(std::move(jobs));
}

SimpleWait TaskContext::barrier(Location loc, std::uint32_t visibility_class) {
  return SimpleWait(this, SimpleWait::Kind::Barrier, loc, visibility_class, false);
}

EventId TaskContext::new_event() { return core_->new_event(); }

SimpleWait TaskContext::wait_event(EventId e) {
  return SimpleWait(this, SimpleWait::Kind::Event, Location::ram(), e, core_->event_signaled(e));
}

void TaskContext::signal(EventId e) { core_->signal(e); }

std::optional<ChunkRef> TaskContext::try_get(const Operator& node, const Coord& pos, Location loc) {
  return core_->try_get(chunk_id(node.id(), pos), loc);
}

bool TaskContext::is_resident(const Operator& node, const Coord& pos, Location loc) const {
  if (!core_->stores().has(loc)) return false;
  auto v = core_->stores().at(loc).peek(chunk_id(node.id(), pos));
  return v && v->state == ChunkState::Final;
}

std::shared_ptr<void> TaskContext::state_lookup(const Id128& key, std::type_index t) {
  return core_->state_lookup({key, t});
}

void TaskContext::state_insert(const Id128& key, std::type_index t, std::shared_ptr<void> v) {
  core_->state_insert({key, t}, std::move(v));
}

void TaskContext::register_reclaimer(std::weak_ptr<Reclaimer> r) {
  core_->register_reclaimer(std::move(r));
}

void TaskContext::add_bytes_read(std::uint64_t n) { core_->stats().bytes_read += n; }

bool TaskContext::saw_preview() const { return rec_->saw_preview; }

// Runtime.

Runtime::Runtime(EngineConfig cfg) : core_(std::make_unique<detail::Core>(std::move(cfg))) {}

Runtime::~Runtime() = default;

const EngineConfig& Runtime::config() const { return core_->config(); }

std::future<std::vector<ResolvedChunk>> Runtime::resolve_async(const OperatorPtr& node,
                                                               std::vector<Coord> positions,
                                                               ResolveOptions opts) {
  return core_->start_resolve(node, std::move(positions), opts);
}

std::vector<ResolvedChunk> Runtime::resolve(const OperatorPtr& node, std::vector<Coord> positions,
                                            ResolveOptions opts) {
  if (core_->on_manager()) throw Error("resolve must not be called from a task body");
  return resolve_async(node, std::move(positions), opts).get();
}

ResolvedChunk Runtime::resolve_one(const OperatorPtr& node, const Coord& pos, ResolveOptions opts) {
  auto r = resolve(node, {pos}, opts);
  return std::move(r.front());
}

void Runtime::invoke(std::function<void()> f) const {
  if (core_->on_manager()) {
    f();
    return;
  }
  std::promise<void> done;
  auto fut = done.get_future();
  core_->post([&] {
    try {
      f();
      done.set_value();
    } catch (...) {
      done.set_exception(std::current_exception());
    }
  });
  fut.get();
}

RuntimeStats Runtime::stats() const {
  RuntimeStats s;
  invoke([&] { s = core_->stats(); });
  return s;
}

StoreStats Runtime::store_stats(Location loc) const {
  StoreStats s;
  invoke([&] { s = core_->stores().at(loc).stats(); });
  return s;
}

std::vector<TraceEvent> Runtime::trace() const {
  std::vector<TraceEvent> t;
  invoke([&] { t = core_->trace(); });
  return t;
}

std::optional<ChunkState> Runtime::stored_state(const Operator& node, const Coord& pos,
                                                Location loc) const {
  std::optional<ChunkState> st;
  invoke([&] {
    if (!core_->stores().has(loc)) return;
    if (auto v = core_->stores().at(loc).peek(chunk_id(node.id(), pos))) st = v->state;
  });
  return st;
}

void Runtime::evict_all(Location loc) {
  invoke([&] { core_->evict_all(loc); });
}

}  // namespace chunkflow
