// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/page_table.hpp"

#include <algorithm>
#include <cstdlib>

namespace chunkflow {

namespace {

// Entry encoding: 0 = unmapped; low two bits 1 = payload, 2 = child page; value in the rest.
constexpr std::uint64_t kPayloadTag = 1;
constexpr std::uint64_t kChildTag = 2;

std::uint64_t digit(std::uint64_t index, int level) {
  return (index >> ((PageTable::kLevels - 1 - level) * PageTable::kDigitBits)) & (PageTable::kPageEntries - 1);
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

struct PageTable::Page {
  // calloc keeps untouched parts of a page uncommitted.
  std::atomic<std::uint64_t>* entries =
      static_cast<std::atomic<std::uint64_t>*>(std::calloc(kPageEntries, sizeof(std::atomic<std::uint64_t>)));
  std::atomic<std::uint32_t> live{0};
  std::uint32_t parent = 0;
  std::uint32_t slot = 0;
  int depth = 0;

  Page() {
    if (!entries) throw std::bad_alloc();
  }
  ~Page() { std::free(entries); }
};

PageTable::PageTable(std::size_t max_pages, std::function<void(PayloadRef)> on_release)
    : pages_(std::max<std::size_t>(max_pages, kLevels)), on_release_(std::move(on_release)) {
  for (std::size_t i = pages_.size(); i-- > 1;) free_.push_back(static_cast<std::uint32_t>(i));
  pages_[0].store(new Page, std::memory_order_release);
}

PageTable::~PageTable() {
  for (auto& p : pages_) delete p.load(std::memory_order_relaxed);
}

std::uint32_t PageTable::allocate_page(std::uint32_t parent, std::uint32_t slot) {
  std::lock_guard lock(mu_);
  if (free_.empty())
    throw ReclamationNeeded("page table pool of " + std::to_string(pages_.size()) + " pages is exhausted");
  const std::uint32_t p = free_.back();
  free_.pop_back();
  Page* page = pages_[p].load(std::memory_order_relaxed);
  if (!page) {
    page = new Page;
    pages_[p].store(page, std::memory_order_release);
  }
  Page* par = pages_[parent].load(std::memory_order_relaxed);
  page->parent = parent;
  page->slot = slot;
  page->depth = par->depth + 1;
  return p;
}

void PageTable::free_page(std::uint32_t p) {
  std::lock_guard lock(mu_);
  reclaimable_.erase(p);
  free_.push_back(p);
}

void PageTable::page_emptied(std::uint32_t p) {
  if (p == 0) return;
  std::lock_guard lock(mu_);
  reclaimable_[p] = epoch();
}

void PageTable::insert(std::uint64_t index, PayloadRef ref) {
  if (index >= kIndexLimit)
    throw InvalidCoordinate("chunk index " + std::to_string(index) + " exceeds the page table range");
  if (ref >= (std::uint64_t{1} << 62)) throw InvalidArgument("payload reference out of range");
  std::uint32_t p = 0;
  for (int level = 0; level < kLevels - 1; ++level) {
    Page* page = pages_[p].load(std::memory_order_acquire);
    auto& e = page->entries[digit(index, level)];
    std::uint64_t v = e.load(std::memory_order_acquire);
    if (v == 0) {
      const std::uint32_t np = allocate_page(p, static_cast<std::uint32_t>(digit(index, level)));
      const std::uint64_t child = (std::uint64_t{np} << 2) | kChildTag;
      if (e.compare_exchange_strong(v, child, std::memory_order_acq_rel, std::memory_order_acquire)) {
        page->live.fetch_add(1, std::memory_order_relaxed);
        v = child;
      } else {
        free_page(np);
      }
    }
    p = static_cast<std::uint32_t>(v >> 2);
  }
  Page* leaf = pages_[p].load(std::memory_order_acquire);
  const std::uint64_t old =
      leaf->entries[digit(index, kLevels - 1)].exchange((ref << 2) | kPayloadTag, std::memory_order_acq_rel);
  if (old == 0)
    leaf->live.fetch_add(1, std::memory_order_relaxed);
  else if (on_release_)
    on_release_(old >> 2);
}

bool PageTable::remove(std::uint64_t index) {
  if (index >= kIndexLimit) return false;
  std::uint32_t p = 0;
  for (int level = 0; level < kLevels - 1; ++level) {
    const std::uint64_t v = pages_[p].load(std::memory_order_acquire)->entries[digit(index, level)].load(
        std::memory_order_acquire);
    if ((v & 3) != kChildTag) return false;
    p = static_cast<std::uint32_t>(v >> 2);
  }
  Page* leaf = pages_[p].load(std::memory_order_acquire);
  auto& e = leaf->entries[digit(index, kLevels - 1)];
  std::uint64_t v = e.load(std::memory_order_acquire);
  do {
    if ((v & 3) != kPayloadTag) return false;
  } while (!e.compare_exchange_weak(v, 0, std::memory_order_acq_rel, std::memory_order_acquire));
  if (leaf->live.fetch_sub(1, std::memory_order_acq_rel) == 1) page_emptied(p);
  if (on_release_) on_release_(v >> 2);
  return true;
}

std::optional<PageTable::PayloadRef> PageTable::lookup(std::uint64_t index, int* depth) const {
  if (depth) *depth = 0;
  if (index >= kIndexLimit) return std::nullopt;
  std::uint32_t p = 0;
  for (int level = 0; level < kLevels; ++level) {
    const std::uint64_t v = pages_[p].load(std::memory_order_acquire)->entries[digit(index, level)].load(
        std::memory_order_acquire);
    if (depth) ++*depth;
    if (level == kLevels - 1) {
      if ((v & 3) != kPayloadTag) return std::nullopt;
      return v >> 2;
    }
    if ((v & 3) != kChildTag) return std::nullopt;
    p = static_cast<std::uint32_t>(v >> 2);
  }
  return std::nullopt;
}

std::size_t PageTable::pages_in_use() const {
  std::lock_guard lock(mu_);
  return pages_.size() - free_.size();
}

std::size_t PageTable::reclaimable_pages() const {
  std::lock_guard lock(mu_);
  return reclaimable_.size();
}

std::size_t PageTable::collect_pages(std::uint64_t completed_epoch) {
  std::size_t freed = 0;
  for (bool again = true; again;) {
    again = false;
    std::vector<std::uint32_t> ready;
    {
      std::lock_guard lock(mu_);
      for (auto it = reclaimable_.begin(); it != reclaimable_.end();) {
        if (it->second > completed_epoch) {
          ++it;
          continue;
        }
        ready.push_back(it->first);
        it = reclaimable_.erase(it);
      }
    }
    for (std::uint32_t p : ready) {
      Page* page = pages_[p].load(std::memory_order_acquire);
      if (page->live.load(std::memory_order_acquire) != 0) continue;
      Page* parent = pages_[page->parent].load(std::memory_order_acquire);
      parent->entries[page->slot].store(0, std::memory_order_release);
      if (parent->live.fetch_sub(1, std::memory_order_acq_rel) == 1 && page->parent != 0) {
        page_emptied(page->parent);
        again = true;
      }
      {
        std::lock_guard lock(mu_);
        free_.push_back(p);
      }
      ++freed;
    }
  }
  return freed;
}

std::vector<std::pair<std::uint64_t, PageTable::PayloadRef>> PageTable::entries() const {
  std::vector<std::pair<std::uint64_t, PayloadRef>> out;
  std::function<void(std::uint32_t, int, std::uint64_t)> walk = [&](std::uint32_t p, int level, std::uint64_t prefix) {
    const Page* page = pages_[p].load(std::memory_order_acquire);
    for (std::uint64_t i = 0; i < kPageEntries; ++i) {
      const std::uint64_t v = page->entries[i].load(std::memory_order_acquire);
      if (v == 0) continue;
      const std::uint64_t idx = (prefix << kDigitBits) | i;
      if (level == kLevels - 1) {
        if ((v & 3) == kPayloadTag) out.emplace_back(idx, v >> 2);
      } else if ((v & 3) == kChildTag) {
        walk(static_cast<std::uint32_t>(v >> 2), level + 1, idx);
      }
    }
  };
  walk(0, 0, 0);
  return out;
}

// ---- UseKey / RequestTable ----

namespace {
constexpr std::uint64_t kEmptySlot = ~std::uint64_t{0};
}

std::uint64_t UseKey::pack() const {
  if (index >= PageTable::kIndexLimit) throw InvalidCoordinate("use key index exceeds 48 bits");
  return index | (std::uint64_t{level} << 48) | (std::uint64_t{page} << 56);
}

UseKey UseKey::unpack(std::uint64_t v) {
  return UseKey{v & (PageTable::kIndexLimit - 1), static_cast<std::uint8_t>((v >> 48) & 0xff), ((v >> 56) & 1) != 0};
}

RequestTable::RequestTable(std::size_t capacity, std::size_t probe_bound)
    : slots_(capacity), probe_bound_(std::min(probe_bound, capacity)) {
  if (capacity == 0 || probe_bound == 0) throw InvalidArgument("request table needs capacity and probe bound > 0");
  for (auto& s : slots_) s.store(kEmptySlot, std::memory_order_relaxed);
}

bool RequestTable::note(const UseKey& key) {
  const std::uint64_t k = key.pack();
  const std::size_t start = mix(k) % slots_.size();
  for (std::size_t i = 0; i < probe_bound_; ++i) {
    auto& s = slots_[(start + i) % slots_.size()];
    std::uint64_t v = s.load(std::memory_order_relaxed);
    if (v == k) return true;
    if (v == kEmptySlot) {
      if (s.compare_exchange_strong(v, k, std::memory_order_relaxed)) return true;
      if (v == k) return true;
    }
  }
  drops_.fetch_add(1, std::memory_order_relaxed);
  return false;
}

std::vector<UseKey> RequestTable::drain() {
  std::vector<UseKey> out;
  for (auto& s : slots_) {
    const std::uint64_t v = s.exchange(kEmptySlot, std::memory_order_relaxed);
    if (v != kEmptySlot) out.push_back(UseKey::unpack(v));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---- BrickDirectory ----

BrickDirectory::BrickDirectory(std::size_t levels, Location loc, std::size_t max_pages_per_level) : loc_(loc) {
  if (levels == 0 || levels > 256) throw InvalidArgument("brick directory needs 1 to 256 levels");
  for (std::size_t l = 0; l < levels; ++l) tables_.push_back(std::make_unique<PageTable>(max_pages_per_level));
}

BrickDirectory::~BrickDirectory() = default;

bool BrickDirectory::pinned(const Slot& s) const { return s.pin_pass == pass_generation_; }

void BrickDirectory::insert_entry(std::size_t level, std::uint64_t index, Slot* s) {
  const auto ref = static_cast<PageTable::PayloadRef>(reinterpret_cast<std::uintptr_t>(s));
  try {
    tables_[level]->insert(index, ref);
    return;
  } catch (const ReclamationNeeded&) {
    if (active_passes_ > 0) throw;
  }
  // Free pages of this level: evict its least recently used unpinned chunks, then collect.
  PageTable& t = *tables_[level];
  for (auto it = lru_.begin(); it != lru_.end();) {
    const UseKey key = it->second;
    ++it;
    if (key.level != level || pinned(*slots_.at(key))) continue;
    drop(slots_.at(key).get());
    ++evictions_;
    t.advance_epoch();
    if (t.collect_pages(t.epoch()) > 0) break;
  }
  t.insert(index, ref);
}

void BrickDirectory::map(std::size_t level, std::uint64_t index, ChunkRef ref, bool pin) {
  if (level >= tables_.size()) throw InvalidArgument("brick directory level out of range");
  const UseKey key{index, static_cast<std::uint8_t>(level), false};
  auto it = slots_.find(key);
  if (it != slots_.end()) {
    if (pin) it->second->pin_pass = pass_generation_;
    return;
  }
  auto s = std::make_unique<Slot>();
  s->data = ref.bytes();
  s->ref = std::move(ref);
  s->key = key;
  s->stamp = ++clock_;
  s->pin_pass = pin ? pass_generation_ : 0;
  insert_entry(level, index, s.get());
  bytes_ += s->data.size();
  lru_.emplace(s->stamp, key);
  slots_.emplace(key, std::move(s));
}

bool BrickDirectory::unmap(std::size_t level, std::uint64_t index) {
  auto it = slots_.find(UseKey{index, static_cast<std::uint8_t>(level), false});
  if (it == slots_.end()) return false;
  drop(it->second.get());
  return true;
}

bool BrickDirectory::pin(std::size_t level, std::uint64_t index) {
  auto it = slots_.find(UseKey{index, static_cast<std::uint8_t>(level), false});
  if (it == slots_.end()) return false;
  it->second->pin_pass = pass_generation_;
  return true;
}

bool BrickDirectory::mapped(std::size_t level, std::uint64_t index) const {
  return slots_.count(UseKey{index, static_cast<std::uint8_t>(level), false}) != 0;
}

std::span<const std::byte> BrickDirectory::find(std::size_t level, std::uint64_t index) const {
  const auto ref = tables_[level]->lookup(index);
  if (!ref) return {};
  return reinterpret_cast<const Slot*>(static_cast<std::uintptr_t>(*ref))->data;
}

void BrickDirectory::drop(Slot* s) {
  tables_[s->key.level]->remove(s->key.index);
  lru_.erase({s->stamp, s->key});
  bytes_ -= s->data.size();
  auto node = slots_.extract(s->key);
  if (active_passes_ > 0) deferred_.push_back(std::move(node.mapped()));
}

void BrickDirectory::touch(const std::vector<UseKey>& used) {
  for (const UseKey& k : used) {
    if (k.page) continue;
    auto it = slots_.find(k);
    if (it == slots_.end()) continue;
    Slot& s = *it->second;
    lru_.erase({s.stamp, k});
    s.stamp = ++clock_;
    lru_.emplace(s.stamp, k);
  }
}

void BrickDirectory::begin_pass() { ++active_passes_; }

void BrickDirectory::end_pass() {
  if (active_passes_ == 0) throw Error("brick directory pass ended twice");
  if (--active_passes_ > 0) return;
  ++pass_generation_;
  flush_deferred();
}

void BrickDirectory::flush_deferred() {
  deferred_.clear();
  for (auto& t : tables_) {
    t->advance_epoch();
    t->collect_pages(t->epoch());
  }
}

std::uint64_t BrickDirectory::reclaim(Location loc, std::uint64_t wanted_bytes) {
  if (loc != loc_) return 0;
  std::uint64_t freed = 0;
  for (auto it = lru_.begin(); it != lru_.end() && freed < wanted_bytes;) {
    Slot* s = slots_.at(it->second).get();
    ++it;
    if (pinned(*s)) continue;
    freed += s->data.size();
    drop(s);
    ++evictions_;
  }
  return active_passes_ > 0 ? 0 : freed;
}

std::vector<UseKey> BrickDirectory::lru_order() const {
  std::vector<UseKey> out;
  for (const auto& [stamp, key] : lru_) out.push_back(key);
  return out;
}

}  // namespace chunkflow
