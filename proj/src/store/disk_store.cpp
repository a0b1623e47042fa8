// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cstring>

#include "chunkflow/store.hpp"

namespace chunkflow {

namespace {

constexpr std::array<char, 4> kMagic = {'P', 'L', 'C', 'S'};
constexpr std::size_t kIndexRecord = 16 + 8 + 8 + 1;

void put_u64(std::byte* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

std::uint64_t get_u64(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

FileBacking::FileBacking(const std::filesystem::path& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
}

FileBacking::~FileBacking() {
  if (fd_ >= 0) ::close(fd_);
}

void FileBacking::read(std::uint64_t offset, std::span<std::byte> out) const {
  std::size_t done = 0;
  while (done < out.size()) {
    const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done,
                              static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("read failed on " + path_.string() + ": " + std::strerror(errno));
    }
    if (n == 0) throw IoError("unexpected end of file in " + path_.string());
    done += static_cast<std::size_t>(n);
  }
}

void FileBacking::write(std::uint64_t offset, std::span<const std::byte> data) const {
  std::size_t done = 0;
  while (done < data.size()) {
    const ssize_t n = ::pwrite(fd_, data.data() + done, data.size() - done,
                               static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("write failed on " + path_.string() + ": " + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

void FileBacking::truncate(std::uint64_t size) const {
  if (::ftruncate(fd_, static_cast<off_t>(size)) != 0)
    throw IoError("truncate failed on " + path_.string() + ": " + std::strerror(errno));
}

std::uint64_t FileBacking::allocate(std::uint64_t quantized) {
  auto it = free_.find(quantized);
  if (it != free_.end() && !it->second.empty()) {
    const std::uint64_t off = it->second.back();
    it->second.pop_back();
    return off;
  }
  const std::uint64_t off = end_;
  end_ += quantized;
  return off;
}

void FileBacking::release(std::uint64_t offset, std::uint64_t quantized) {
  free_[quantized].push_back(offset);
}

std::unique_ptr<Store> Store::open_disk(const std::filesystem::path& path, StoreConfig cfg,
                                        std::shared_ptr<StampClock> clock) {
  auto store = std::make_unique<Store>(Location::disk(), cfg, std::move(clock));
  store->file_ = std::make_unique<FileBacking>(path);
  FileBacking& f = *store->file_;

  const auto file_size = std::filesystem::file_size(path);
  if (file_size == 0) {
    store->flush();
    return store;
  }
  std::array<std::byte, FileBacking::kHeaderSize> header{};
  if (file_size < header.size()) throw FormatError(path.string() + ": truncated disk-store header");
  f.read(0, header);
  if (std::memcmp(header.data(), kMagic.data(), 4) != 0)
    throw FormatError(path.string() + ": not a disk-store file");
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(header[4 + i]) << (8 * i);
  if (version != FileBacking::kVersion)
    throw FormatError(path.string() + ": unsupported disk-store version " + std::to_string(version));
  const std::uint64_t index_offset = get_u64(header.data() + 8);
  if (index_offset == 0) return store;
  if (index_offset + 8 > file_size) throw FormatError(path.string() + ": index past end of file");

  std::array<std::byte, 8> count_buf{};
  f.read(index_offset, count_buf);
  const std::uint64_t count = get_u64(count_buf.data());
  if (index_offset + 8 + count * kIndexRecord > file_size)
    throw FormatError(path.string() + ": truncated index");
  std::vector<std::byte> records(count * kIndexRecord);
  f.read(index_offset + 8, records);

  std::uint64_t end = FileBacking::kHeaderSize;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::byte* r = records.data() + i * kIndexRecord;
    ChunkId id;
    std::memcpy(id.value.bytes.data(), r, 16);
    const std::uint64_t offset = get_u64(r + 16);
    const std::uint64_t size = get_u64(r + 24);
    const auto state = static_cast<ChunkState>(r[32]);
    if (state != ChunkState::Preview && state != ChunkState::Final)
      throw FormatError(path.string() + ": bad entry state");
    const std::uint64_t q = quantize_size(std::max<std::uint64_t>(size, 1),
                                          cfg.quantization_mantissa_bits);
    if (offset < FileBacking::kHeaderSize || offset + q > index_offset)
      throw FormatError(path.string() + ": entry extent out of range");
    if (store->stats_.used + q > cfg.capacity_bytes) break;
    const EntryKey key = store->next_key_++;
    Entry e;
    e.id = id;
    e.size = size;
    e.quantized = q;
    e.state = state;
    e.stamp = store->clock_->next();
    e.block.offset = offset;
    end = std::max(end, offset + q);
    store->lru_.emplace(e.stamp, key);
    store->index_.emplace(id, key);
    store->stats_.used += q;
    store->stats_.live_bytes += q;
    store->entries_.emplace(key, std::move(e));
  }
  store->note_used();
  f.set_end(end);
  return store;
}

void Store::flush() {
  if (!file_) return;
  std::vector<std::byte> buf(8 + index_.size() * kIndexRecord);
  put_u64(buf.data(), index_.size());
  std::size_t i = 0;
  for (const auto& [id, key] : index_) {
    const Entry& e = entries_.at(key);
    std::byte* r = buf.data() + 8 + i * kIndexRecord;
    std::memcpy(r, id.value.bytes.data(), 16);
    put_u64(r + 16, e.block.offset);
    put_u64(r + 24, e.size);
    r[32] = static_cast<std::byte>(e.state);
    ++i;
  }
  const std::uint64_t index_offset = file_->end();
  file_->write(index_offset, buf);
  file_->truncate(index_offset + buf.size());

  std::array<std::byte, FileBacking::kHeaderSize> header{};
  std::memcpy(header.data(), kMagic.data(), 4);
  for (int k = 0; k < 4; ++k)
    header[4 + k] = static_cast<std::byte>((FileBacking::kVersion >> (8 * k)) & 0xFF);
  put_u64(header.data() + 8, index_offset);
  file_->write(0, header);
}

}  // namespace chunkflow
