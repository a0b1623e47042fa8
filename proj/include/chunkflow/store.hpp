// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "chunkflow/chunk_model.hpp"

namespace chunkflow {

struct Location {
  enum class Kind : std::uint8_t { Ram = 0, Device = 1, Disk = 2 };
  Kind kind = Kind::Ram;
  std::uint32_t index = 0;  // device index; 0 otherwise

  static constexpr Location ram() { return {Kind::Ram, 0}; }
  static constexpr Location device(std::uint32_t i = 0) { return {Kind::Device, i}; }
  static constexpr Location disk() { return {Kind::Disk, 0}; }

  bool is_device() const { return kind == Kind::Device; }
  std::string name() const;
  static Location parse(const std::string& s);
  friend constexpr auto operator<=>(const Location&, const Location&) = default;
};

// Ordered: a Final entry satisfies a request for Preview, never the reverse.
enum class ChunkState : std::uint8_t { InFlight = 0, Preview = 1, Final = 2 };

const char* to_string(ChunkState s);

// Rounds up to a multiple of 2^max(0, floor(log2 requested) - mantissa_bits), i.e. to the
// nearest 1/256th (for 8 bits) of the requested size, so similar sizes share a bucket.
std::uint64_t quantize_size(std::uint64_t requested, unsigned mantissa_bits = 8);

struct StoreConfig {
  std::uint64_t capacity_bytes = 0;
  double gc_target_fraction = 0.10;
  unsigned quantization_mantissa_bits = 8;
};

using EntryKey = std::uint64_t;

class Store;
class FileBacking;

// A quantized block of store capacity not (yet) owned by an entry. Memory stores hand out
// writable bytes; the disk store hands out a file extent.
// Dropping a valid allocation returns it to its store's bucket cache.
class Allocation {
 public:
  Allocation() = default;
  Allocation(Allocation&& o) noexcept { *this = std::move(o); }
  Allocation& operator=(Allocation&& o) noexcept;
  Allocation(const Allocation&) = delete;
  Allocation& operator=(const Allocation&) = delete;
  ~Allocation() { reset(); }
  void reset() noexcept;

  Location location() const { return location_; }
  std::uint64_t size() const { return size_; }
  std::uint64_t quantized() const { return quantized_; }
  // Empty for disk allocations.
  std::span<std::byte> bytes() { return {mem_.get(), mem_ ? static_cast<std::size_t>(size_) : 0}; }
  std::span<const std::byte> bytes() const {
    return {mem_.get(), mem_ ? static_cast<std::size_t>(size_) : 0};
  }
  std::uint64_t disk_offset() const { return offset_; }
  bool valid() const { return quantized_ != 0; }

 private:
  friend class Store;
  Store* owner_ = nullptr;
  Location location_{};
  std::uint64_t size_ = 0;
  std::uint64_t quantized_ = 0;
  std::unique_ptr<std::byte[]> mem_;
  std::uint64_t offset_ = 0;
};

enum class AllocStatus { Ok, ReclamationNeeded, TooLarge };

struct AllocResult {
  AllocStatus status = AllocStatus::Ok;
  Allocation allocation;
};

// Snapshot of one stored chunk.
struct EntryView {
  EntryKey key = 0;
  ChunkId id;
  std::uint64_t size_bytes = 0;
  std::uint64_t quantized = 0;
  ChunkState state = ChunkState::InFlight;
  std::uint64_t lru_stamp = 0;
  std::uint32_t ref_count = 0;
  std::uint64_t epoch = 0;
  std::span<const std::byte> data;  // empty for the disk store
  std::uint64_t disk_offset = 0;
};

// Single global counter so that stamps are unique across all stores of a runtime.
class StampClock {
 public:
  std::uint64_t next() { return ++value_; }

 private:
  std::uint64_t value_ = 0;
};

struct StoreStats {
  std::uint64_t capacity = 0;
  std::uint64_t used = 0;       // live entries + bucket cache + replaced-but-referenced
  std::uint64_t peak_used = 0;
  std::uint64_t live_bytes = 0;  // quantized bytes of indexed entries
  std::uint64_t bucket_bytes = 0;
  std::uint64_t entries = 0;
  std::uint64_t inserts = 0;
  std::uint64_t bucket_hits = 0;
  std::uint64_t gc_runs = 0;
  std::uint64_t gc_freed = 0;
  std::uint64_t bucket_flushes = 0;
};

// Bounded-capacity chunk storage at one location.
//
// Entries with ref_count > 0 are never reclaimed. Unreferenced entries wait in an LRU queue
// ordered by their stamp; garbage_collect pops it oldest first. Freed allocations go to a
// size-bucket cache and are handed out again for the same quantized size.
//
// Not thread-safe: owned by the engine's manager thread. Payload bytes of referenced
// entries may be read concurrently.
class Store {
 public:
  Store(Location loc, StoreConfig cfg, std::shared_ptr<StampClock> clock = nullptr);
  // Opens (or creates) a persistent disk store file.
  static std::unique_ptr<Store> open_disk(const std::filesystem::path& path, StoreConfig cfg,
                                          std::shared_ptr<StampClock> clock = nullptr);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  Location location() const { return location_; }
  const StoreConfig& config() const { return cfg_; }

  AllocResult allocate(std::uint64_t size_bytes);
  // Returns an unused allocation to the size-bucket cache.
  void free(Allocation&& a);

  // Frees unreferenced entries oldest-stamp first until gc_target_fraction * capacity bytes
  // are freed. On device stores stops at the first entry whose epoch is newer than
  // `completed_epoch`. Flushes the bucket cache if the target was not reached.
  std::uint64_t garbage_collect(std::uint64_t completed_epoch = UINT64_MAX);
  void flush_buckets();

  // Hit iff the chunk is present with state >= want; a hit takes a reference and restamps.
  std::optional<EntryView> lookup(const ChunkId& id, ChunkState want);
  // No reference, no restamp.
  std::optional<EntryView> peek(const ChunkId& id) const;

  // Inserts with ref_count 0 (so the entry is immediately in the LRU queue). A second Final
  // insert of the same id keeps the first; a Final insert replaces a Preview entry.
  EntryView insert(const ChunkId& id, Allocation&& payload, ChunkState state);

  void acquire(EntryKey key);
  // `epoch` is the device epoch after which no submitted work reads the payload.
  void release(EntryKey key, std::uint64_t epoch = 0);
  std::uint32_t ref_count(EntryKey key) const;

  // Exclusive write access iff the caller holds the only reference. The entry leaves the
  // index and its storage becomes the returned allocation; the caller's reference is consumed.
  std::optional<Allocation> try_replace_inplace(EntryKey key);

  StoreStats stats() const;
  std::vector<EntryView> entries() const;
  // Keys of unreferenced entries, oldest first.
  std::vector<EntryKey> lru_queue() const;

  FileBacking* file() const { return file_.get(); }
  // Disk store: writes the index and header.
  void flush();

 private:
  struct Block {
    std::unique_ptr<std::byte[]> mem;
    std::uint64_t offset = 0;
  };
  struct Entry {
    ChunkId id;
    std::uint64_t size = 0;
    std::uint64_t quantized = 0;
    ChunkState state = ChunkState::InFlight;
    std::uint64_t stamp = 0;
    std::uint32_t refs = 0;
    std::uint64_t epoch = 0;
    bool indexed = true;  // false once replaced or removed while still referenced
    Block block;
  };

  EntryView view(EntryKey key, const Entry& e) const;
  Block new_block(std::uint64_t quantized);
  void release_block(Block&& b, std::uint64_t quantized);
  void drop_entry(EntryKey key);
  void note_used();

  Location location_;
  StoreConfig cfg_;
  std::shared_ptr<StampClock> clock_;
  std::unique_ptr<FileBacking> file_;

  EntryKey next_key_ = 1;
  std::unordered_map<EntryKey, Entry> entries_;
  std::unordered_map<ChunkId, EntryKey, Id128Hash> index_;
  std::map<std::uint64_t, EntryKey> lru_;  // stamp -> key, refs == 0 only
  std::unordered_map<std::uint64_t, std::vector<Block>> buckets_;
  StoreStats stats_;
};

// Disk-store file: header {magic "PLCS", version u32, index offset u64}, payload extents,
// index {u64 count, then per entry: id[16], offset u64, size u64, state u8}. Little-endian.
// Positional reads and writes are safe from worker threads.
class FileBacking {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint64_t kHeaderSize = 16;

  explicit FileBacking(const std::filesystem::path& path);
  ~FileBacking();
  FileBacking(const FileBacking&) = delete;
  FileBacking& operator=(const FileBacking&) = delete;

  const std::filesystem::path& path() const { return path_; }
  void read(std::uint64_t offset, std::span<std::byte> out) const;
  void write(std::uint64_t offset, std::span<const std::byte> data) const;

  // Extent allocator. Manager thread only.
  std::uint64_t allocate(std::uint64_t quantized);
  void release(std::uint64_t offset, std::uint64_t quantized);
  std::uint64_t end() const { return end_; }
  void set_end(std::uint64_t e) { end_ = e; }
  void truncate(std::uint64_t size) const;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  std::uint64_t end_ = kHeaderSize;
  std::unordered_map<std::uint64_t, std::vector<std::uint64_t>> free_;
};

struct LookupResult {
  enum class Kind { Hit, ElsewhereAt, Miss };
  Kind kind = Kind::Miss;
  Location where{};
  EntryView entry;  // valid for Hit (a reference was taken)
};

struct DiskStoreConfig {
  std::filesystem::path path;
  StoreConfig store;
};

// The stores of one runtime: RAM, devices, optional persistent disk.
class StoreSet {
 public:
  StoreSet(StoreConfig ram, std::vector<StoreConfig> devices,
           std::optional<DiskStoreConfig> disk = std::nullopt);

  bool has(Location loc) const;
  Store& at(Location loc);
  const Store& at(Location loc) const;
  std::vector<Location> locations() const;

  // Hit iff present at `wanted` with state >= want; ElsewhereAt iff present with state >= want
  // at another location (caller dispatches a transfer); Miss otherwise.
  LookupResult lookup(const ChunkId& id, Location wanted, ChunkState want);

 private:
  std::shared_ptr<StampClock> clock_;
  std::unique_ptr<Store> ram_;
  std::vector<std::unique_ptr<Store>> devices_;
  std::unique_ptr<Store> disk_;
};

}  // namespace chunkflow

template <>
struct std::hash<chunkflow::Location> {
  std::size_t operator()(const chunkflow::Location& l) const noexcept {
    return (static_cast<std::size_t>(l.kind) << 32) ^ l.index;
  }
};

template <>
struct std::hash<chunkflow::ChunkId> {
  std::size_t operator()(const chunkflow::ChunkId& id) const noexcept {
    return static_cast<std::size_t>(id.value.lo());
  }
};
