// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <vector>

#include "chunkflow/engine.hpp"

namespace chunkflow {

// Sparse map from a linear chunk index (< 2^48) to a caller-defined payload reference
// (< 2^62). Three levels of pages with 2^16 entries each; the root page is always resident.
//
// insert/remove/lookup may run concurrently from any thread (entries are updated with
// compare-and-swap, lookups are wait-free). collect_pages must not overlap with inserts.
class PageTable {
 public:
  using PayloadRef = std::uint64_t;
  static constexpr int kLevels = 3;
  static constexpr int kDigitBits = 16;
  static constexpr std::uint64_t kPageEntries = std::uint64_t{1} << kDigitBits;
  static constexpr std::uint64_t kIndexLimit = std::uint64_t{1} << (kLevels * kDigitBits);

  // `max_pages` bounds the page pool (root included). `on_release` is called with every
  // payload reference that leaves the table through remove or replacement.
  explicit PageTable(std::size_t max_pages = 256, std::function<void(PayloadRef)> on_release = {});
  ~PageTable();
  PageTable(const PageTable&) = delete;
  PageTable& operator=(const PageTable&) = delete;

  // Maps `index` to `ref`, allocating missing pages. Throws ReclamationNeeded when the page pool
  // is exhausted, InvalidCoordinate for index >= 2^48.
  void insert(std::uint64_t index, PayloadRef ref);
  // Unmaps `index`; false (no-op) when it was not mapped.
  bool remove(std::uint64_t index);
  // `depth` receives the number of pages visited.
  std::optional<PayloadRef> lookup(std::uint64_t index, int* depth = nullptr) const;

  // Pages whose last entry was removed wait here until collected.
  std::size_t pages_in_use() const;
  std::size_t reclaimable_pages() const;
  std::size_t max_pages() const { return pages_.size(); }

  // Epoch stamped on pages that become empty.
  void advance_epoch() { epoch_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t epoch() const { return epoch_.load(std::memory_order_relaxed); }
  // Unlinks and frees empty pages that became empty at or before `completed_epoch`.
  std::size_t collect_pages(std::uint64_t completed_epoch);

  // Every mapped (index, ref), in index order.
  std::vector<std::pair<std::uint64_t, PayloadRef>> entries() const;

 private:
  struct Page;
  std::uint32_t allocate_page(std::uint32_t parent, std::uint32_t slot);
  void free_page(std::uint32_t p);
  void page_emptied(std::uint32_t p);

  std::vector<std::atomic<Page*>> pages_;
  std::function<void(PayloadRef)> on_release_;
  std::atomic<std::uint64_t> epoch_{0};
  mutable std::mutex mu_;  // free list and reclaimable set
  std::vector<std::uint32_t> free_;
  std::map<std::uint32_t, std::uint64_t> reclaimable_;  // page -> epoch
};

// Key of a use or request report: a chunk (or page-table page) of one LOD level.
struct UseKey {
  std::uint64_t index = 0;  // linear chunk index, or page number for pages
  std::uint8_t level = 0;
  bool page = false;

  std::uint64_t pack() const;
  static UseKey unpack(std::uint64_t v);
  friend auto operator<=>(const UseKey&, const UseKey&) = default;
};

// Fixed-size open-addressing set of UseKeys with bounded linear probing. note() is lock-free
// and may drop keys when the probe bound is hit.
class RequestTable {
 public:
  static constexpr std::size_t kDefaultCapacity = 2048;
  static constexpr std::size_t kDefaultProbeBound = 16;

  explicit RequestTable(std::size_t capacity = kDefaultCapacity, std::size_t probe_bound = kDefaultProbeBound);

  // True when the key is present afterwards, false when it was dropped.
  bool note(const UseKey& key);
  // Keys noted since the last drain, sorted; the table is empty afterwards. Not concurrent with note().
  std::vector<UseKey> drain();

  std::size_t capacity() const { return slots_.size(); }
  std::uint64_t drops() const { return drops_.load(std::memory_order_relaxed); }

 private:
  std::vector<std::atomic<std::uint64_t>> slots_;
  std::size_t probe_bound_;
  std::atomic<std::uint64_t> drops_{0};
};

// Resident chunks of a set of LOD levels (or other tensors), reachable from kernels through
// one page table per level. The directory holds a reference to every mapped chunk, orders them
// by reported use and releases the least recently used ones when a store needs memory.
//
// map/unmap/touch/begin_pass/end_pass/reclaim run on the manager thread; find() is wait-free
// and may run on workers between begin_pass and end_pass.
class BrickDirectory : public Reclaimer {
 public:
  BrickDirectory(std::size_t levels, Location loc = Location::ram(), std::size_t max_pages_per_level = 256);
  ~BrickDirectory() override;

  std::size_t levels() const { return tables_.size(); }
  Location location() const { return loc_; }

  // Maps a chunk; the directory keeps `ref`. Pinned chunks are not reclaimed before end_pass.
  void map(std::size_t level, std::uint64_t index, ChunkRef ref, bool pin = true);
  bool unmap(std::size_t level, std::uint64_t index);
  // Pins an already mapped chunk for the current pass; false when it is not mapped.
  bool pin(std::size_t level, std::uint64_t index);
  bool mapped(std::size_t level, std::uint64_t index) const;

  // Payload of a mapped chunk or an empty span.
  std::span<const std::byte> find(std::size_t level, std::uint64_t index) const;

  // Marks uses reported by kernels (chunk keys only) as most recent, in order.
  void touch(const std::vector<UseKey>& used);

  // Kernels may read payloads between begin_pass and the matching end_pass; releases requested
  // meanwhile are deferred until no pass is active.
  void begin_pass();
  void end_pass();

  std::uint64_t reclaim(Location loc, std::uint64_t wanted_bytes) override;

  std::size_t mapped_count() const { return slots_.size(); }
  std::uint64_t mapped_bytes() const { return bytes_; }
  std::uint64_t evictions() const { return evictions_; }
  // Mapped chunks from least to most recently used.
  std::vector<UseKey> lru_order() const;
  const PageTable& table(std::size_t level) const { return *tables_.at(level); }

 private:
  struct Slot {
    ChunkRef ref;
    std::span<const std::byte> data;
    UseKey key;
    std::uint64_t stamp = 0;
    std::uint64_t pin_pass = 0;  // pinned while equal to pass_generation_ (until no pass is active)
  };

  void insert_entry(std::size_t level, std::uint64_t index, Slot* s);
  void drop(Slot* s);
  void flush_deferred();
  bool pinned(const Slot& s) const;

  Location loc_;
  std::vector<std::unique_ptr<PageTable>> tables_;
  std::map<UseKey, std::unique_ptr<Slot>> slots_;
  std::set<std::pair<std::uint64_t, UseKey>> lru_;  // (stamp, key)
  std::vector<std::unique_ptr<Slot>> deferred_;
  std::uint64_t clock_ = 0;
  std::uint64_t bytes_ = 0;
  std::uint64_t evictions_ = 0;
  int active_passes_ = 0;
  std::uint64_t pass_generation_ = 1;
};

}  // namespace chunkflow
