// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace chunkflow {

std::string Location::name() const {
  switch (kind) {
    case Kind::Ram: return "ram";
    case Kind::Device: return "device" + std::to_string(index);
    case Kind::Disk: return "disk";
  }
  return "?";
}

Location Location::parse(const std::string& s) {
  if (s == "ram") return ram();
  if (s == "disk") return disk();
  if (s.rfind("device", 0) == 0) {
    const std::string rest = s.substr(6);
    if (rest.empty()) return device(0);
    return device(static_cast<std::uint32_t>(std::stoul(rest)));
  }
  throw InvalidArgument("unknown location '" + s + "'");
}

const char* to_string(ChunkState s) {
  switch (s) {
    case ChunkState::InFlight: return "in-flight";
    case ChunkState::Preview: return "preview";
    case ChunkState::Final: return "final";
  }
  return "?";
}

std::uint64_t quantize_size(std::uint64_t requested, unsigned mantissa_bits) {
  if (requested == 0) return 0;
  const int log2 = std::bit_width(requested) - 1;
  const int shift = std::max(0, log2 - static_cast<int>(mantissa_bits));
  const std::uint64_t g = std::uint64_t{1} << shift;
  return (requested + g - 1) / g * g;
}

Allocation& Allocation::operator=(Allocation&& o) noexcept {
  if (this != &o) {
    reset();
    owner_ = std::exchange(o.owner_, nullptr);
    location_ = o.location_;
    size_ = std::exchange(o.size_, 0);
    quantized_ = std::exchange(o.quantized_, 0);
    mem_ = std::move(o.mem_);
    offset_ = o.offset_;
  }
  return *this;
}

void Allocation::reset() noexcept {
  if (owner_ && quantized_ != 0) owner_->free(std::move(*this));
  owner_ = nullptr;
  quantized_ = 0;
  size_ = 0;
  mem_.reset();
}

Store::Store(Location loc, StoreConfig cfg, std::shared_ptr<StampClock> clock)
    : location_(loc), cfg_(cfg), clock_(clock ? std::move(clock) : std::make_shared<StampClock>()) {
  stats_.capacity = cfg_.capacity_bytes;
}

Store::~Store() {
  if (file_) {
    try {
      flush();
    } catch (...) {
    }
  }
}

void Store::note_used() { stats_.peak_used = std::max(stats_.peak_used, stats_.used); }

Store::Block Store::new_block(std::uint64_t quantized) {
  Block b;
  if (file_) {
    b.offset = file_->allocate(quantized);
  } else {
    b.mem.reset(new std::byte[quantized]);
  }
  return b;
}

void Store::release_block(Block&& b, std::uint64_t quantized) {
  if (file_) file_->release(b.offset, quantized);
  b.mem.reset();
}

AllocResult Store::allocate(std::uint64_t size_bytes) {
  AllocResult r;
  const std::uint64_t q = quantize_size(std::max<std::uint64_t>(size_bytes, 1),
                                        cfg_.quantization_mantissa_bits);
  if (q > cfg_.capacity_bytes) {
    r.status = AllocStatus::TooLarge;
    return r;
  }
  Block b;
  auto it = buckets_.find(q);
  if (it != buckets_.end() && !it->second.empty()) {
    b = std::move(it->second.back());
    it->second.pop_back();
    stats_.bucket_bytes -= q;
    ++stats_.bucket_hits;
  } else {
    if (stats_.used + q > cfg_.capacity_bytes) {
      r.status = AllocStatus::ReclamationNeeded;
      return r;
    }
    b = new_block(q);
    stats_.used += q;
    note_used();
  }
  r.allocation.owner_ = this;
  r.allocation.location_ = location_;
  r.allocation.size_ = size_bytes;
  r.allocation.quantized_ = q;
  r.allocation.mem_ = std::move(b.mem);
  r.allocation.offset_ = b.offset;
  return r;
}

void Store::free(Allocation&& a) {
  if (!a.valid()) return;
  if (a.owner_ != this) throw InvalidArgument("allocation freed into a foreign store");
  Block b{std::move(a.mem_), a.offset_};
  buckets_[a.quantized_].push_back(std::move(b));
  stats_.bucket_bytes += a.quantized_;
  a.owner_ = nullptr;
  a.quantized_ = 0;
  a.size_ = 0;
}

void Store::flush_buckets() {
  for (auto& [q, blocks] : buckets_) {
    for (auto& b : blocks) {
      release_block(std::move(b), q);
      stats_.used -= q;
    }
  }
  buckets_.clear();
  stats_.bucket_bytes = 0;
  ++stats_.bucket_flushes;
}

void Store::drop_entry(EntryKey key) {
  auto it = entries_.find(key);
  Entry& e = it->second;
  if (e.indexed) {
    index_.erase(e.id);
    stats_.live_bytes -= e.quantized;
  }
  release_block(std::move(e.block), e.quantized);
  stats_.used -= e.quantized;
  entries_.erase(it);
}

std::uint64_t Store::garbage_collect(std::uint64_t completed_epoch) {
  ++stats_.gc_runs;
  const auto target = static_cast<std::uint64_t>(
      std::ceil(cfg_.gc_target_fraction * static_cast<double>(cfg_.capacity_bytes)));
  std::uint64_t freed = 0;
  while (freed < target && !lru_.empty()) {
    auto first = lru_.begin();
    const EntryKey key = first->second;
    const Entry& e = entries_.at(key);
    if (location_.is_device() && e.epoch > completed_epoch) break;
    freed += e.quantized;
    lru_.erase(first);
    drop_entry(key);
  }
  if (freed < target) {
    freed += stats_.bucket_bytes;
    flush_buckets();
  }
  stats_.gc_freed += freed;
  return freed;
}

EntryView Store::view(EntryKey key, const Entry& e) const {
  EntryView v;
  v.key = key;
  v.id = e.id;
  v.size_bytes = e.size;
  v.quantized = e.quantized;
  v.state = e.state;
  v.lru_stamp = e.stamp;
  v.ref_count = e.refs;
  v.epoch = e.epoch;
  if (e.block.mem) v.data = {e.block.mem.get(), static_cast<std::size_t>(e.size)};
  v.disk_offset = e.block.offset;
  return v;
}

std::optional<EntryView> Store::lookup(const ChunkId& id, ChunkState want) {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  Entry& e = entries_.at(it->second);
  if (e.state < want) return std::nullopt;
  if (e.refs == 0) lru_.erase(e.stamp);
  ++e.refs;
  e.stamp = clock_->next();
  return view(it->second, e);
}

std::optional<EntryView> Store::peek(const ChunkId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return view(it->second, entries_.at(it->second));
}

EntryView Store::insert(const ChunkId& id, Allocation&& payload, ChunkState state) {
  if (!payload.valid()) throw InvalidArgument("insert of an empty allocation");
  if (payload.owner_ != this)
    throw InvalidArgument("allocation from " + payload.location_.name() + " inserted into " +
                          location_.name());
  ++stats_.inserts;
  if (auto it = index_.find(id); it != index_.end()) {
    Entry& old = entries_.at(it->second);
    if (old.state >= state) {
      // Keep the existing entry; the new payload goes back to the bucket cache.
      free(std::move(payload));
      return view(it->second, old);
    }
    // Upgrade: the old entry leaves the index and lives on only while referenced.
    const EntryKey old_key = it->second;
    index_.erase(it);
    stats_.live_bytes -= old.quantized;
    old.indexed = false;
    if (old.refs == 0) {
      lru_.erase(old.stamp);
      drop_entry(old_key);
    }
  }
  const EntryKey key = next_key_++;
  Entry e;
  e.id = id;
  e.size = payload.size_;
  e.quantized = payload.quantized_;
  e.state = state;
  e.stamp = clock_->next();
  e.block.mem = std::move(payload.mem_);
  e.block.offset = payload.offset_;
  payload.owner_ = nullptr;
  payload.quantized_ = 0;
  payload.size_ = 0;
  lru_.emplace(e.stamp, key);
  stats_.live_bytes += e.quantized;
  index_.emplace(id, key);
  auto [pos, _] = entries_.emplace(key, std::move(e));
  return view(key, pos->second);
}

void Store::acquire(EntryKey key) {
  Entry& e = entries_.at(key);
  if (e.refs == 0) lru_.erase(e.stamp);
  ++e.refs;
}

void Store::release(EntryKey key, std::uint64_t epoch) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvalidArgument("release of unknown entry");
  Entry& e = it->second;
  if (e.refs == 0) throw InvalidArgument("release of unreferenced entry");
  e.epoch = std::max(e.epoch, epoch);
  if (--e.refs > 0) return;
  if (!e.indexed) {
    drop_entry(key);
    return;
  }
  lru_.emplace(e.stamp, key);
}

std::uint32_t Store::ref_count(EntryKey key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? 0 : it->second.refs;
}

std::optional<Allocation> Store::try_replace_inplace(EntryKey key) {
  auto it = entries_.find(key);
  if (it == entries_.end() || it->second.refs != 1) return std::nullopt;
  Entry& e = it->second;
  if (e.indexed) {
    index_.erase(e.id);
    stats_.live_bytes -= e.quantized;
  }
  Allocation a;
  a.owner_ = this;
  a.location_ = location_;
  a.size_ = e.size;
  a.quantized_ = e.quantized;
  a.mem_ = std::move(e.block.mem);
  a.offset_ = e.block.offset;
  entries_.erase(it);
  return a;
}

StoreStats Store::stats() const {
  StoreStats s = stats_;
  s.entries = index_.size();
  return s;
}

std::vector<EntryView> Store::entries() const {
  std::vector<EntryView> out;
  out.reserve(index_.size());
  for (const auto& [id, key] : index_) out.push_back(view(key, entries_.at(key)));
  return out;
}

std::vector<EntryKey> Store::lru_queue() const {
  std::vector<EntryKey> out;
  out.reserve(lru_.size());
  for (const auto& [stamp, key] : lru_) out.push_back(key);
  return out;
}

StoreSet::StoreSet(StoreConfig ram, std::vector<StoreConfig> devices,
                   std::optional<DiskStoreConfig> disk)
    : clock_(std::make_shared<StampClock>()) {
  ram_ = std::make_unique<Store>(Location::ram(), ram, clock_);
  for (std::size_t i = 0; i < devices.size(); ++i)
    devices_.push_back(
        std::make_unique<Store>(Location::device(static_cast<std::uint32_t>(i)), devices[i], clock_));
  if (disk) disk_ = Store::open_disk(disk->path, disk->store, clock_);
}

bool StoreSet::has(Location loc) const {
  switch (loc.kind) {
    case Location::Kind::Ram: return true;
    case Location::Kind::Device: return loc.index < devices_.size();
    case Location::Kind::Disk: return disk_ != nullptr;
  }
  return false;
}

Store& StoreSet::at(Location loc) {
  return const_cast<Store&>(std::as_const(*this).at(loc));
}

const Store& StoreSet::at(Location loc) const {
  if (!has(loc)) throw InvalidArgument("no store at location " + loc.name());
  switch (loc.kind) {
    case Location::Kind::Ram: return *ram_;
    case Location::Kind::Device: return *devices_[loc.index];
    case Location::Kind::Disk: return *disk_;
  }
  return *ram_;
}

std::vector<Location> StoreSet::locations() const {
  std::vector<Location> out{Location::ram()};
  for (std::size_t i = 0; i < devices_.size(); ++i)
    out.push_back(Location::device(static_cast<std::uint32_t>(i)));
  if (disk_) out.push_back(Location::disk());
  return out;
}

LookupResult StoreSet::lookup(const ChunkId& id, Location wanted, ChunkState want) {
  LookupResult r;
  if (auto v = at(wanted).lookup(id, want)) {
    r.kind = LookupResult::Kind::Hit;
    r.where = wanted;
    r.entry = *v;
    return r;
  }
  for (Location loc : locations()) {
    if (loc == wanted) continue;
    if (auto v = at(loc).peek(id); v && v->state >= want) {
      r.kind = LookupResult::Kind::ElsewhereAt;
      r.where = loc;
      return r;
    }
  }
  return r;
}

}  // namespace chunkflow
