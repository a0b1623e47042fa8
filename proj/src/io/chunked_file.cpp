// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>

#include "../operators/common.hpp"
#include "chunkflow/io.hpp"

namespace chunkflow {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'P', 'L', 'C', 'T'};

std::string errno_text() { return std::strerror(errno); }

class Reader {
 public:
  Reader(std::span<const std::byte> b, const std::string& path) : b_(b), path_(path) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > b_.size()) throw FormatError(path_ + ": truncated chunked-file header");
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::byte> b_;
  std::size_t pos_ = 0;
  const std::string& path_;
};

template <class T>
void put(std::vector<std::byte>& out, T v) {
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

// Owns a read-only descriptor shared by the jobs of one source.
struct FileHandle {
  explicit FileHandle(const fs::path& p) : path(p.string()) {
    fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) throw IoError(path + ": cannot open: " + errno_text());
  }
  ~FileHandle() {
    if (fd >= 0) ::close(fd);
  }
  FileHandle(const FileHandle&) = delete;
  FileHandle& operator=(const FileHandle&) = delete;

  void read_at(std::uint64_t offset, std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t n = ::pread(fd, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw IoError(path + ": read failed: " + errno_text());
      if (n == 0) throw FormatError(path + ": unexpected end of file");
      done += static_cast<std::size_t>(n);
    }
  }

  std::string path;
  int fd = -1;
};

class ChunkedFileSource : public OperatorBase<ChunkedFileSource> {
 public:
  ChunkedFileSource(std::shared_ptr<const FileHandle> file, ChunkedFileHeader header, std::vector<std::byte> params)
      : OperatorBase("chunked_file", params, {}, header.md, header.embedding),
        file_(std::move(file)),
        offsets_(std::move(header.offsets)) {}

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const TensorMetaData& md = metadata();
    std::vector<Allocation> outs;
    outs.reserve(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) outs.push_back(co_await ctx.allocate_output());
    std::vector<std::function<void()>> jobs;
    std::uint64_t read = 0;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const std::uint64_t off = offsets_[linearize(md.chunk_grid(), positions[i])];
      auto bytes = outs[i].bytes();
      if (off != 0) read += bytes.size();
      jobs.push_back([this, off, bytes] {
        if (off == 0)
          std::memset(bytes.data(), 0, bytes.size());
        else
          file_->read_at(off, bytes);
      });
    }
    co_await ctx.run_all(std::move(jobs));
    ctx.add_bytes_read(read);
    for (std::size_t i = 0; i < positions.size(); ++i) ctx.commit(positions[i], std::move(outs[i]));
  }

 private:
  std::shared_ptr<const FileHandle> file_;
  std::vector<std::uint64_t> offsets_;
};

std::uint64_t size_of_file(const fs::path& p) {
  std::error_code ec;
  const auto n = fs::file_size(p, ec);
  if (ec) throw IoError(p.string() + ": " + ec.message());
  return n;
}

void write_all(std::ofstream& f, const void* data, std::size_t n, const fs::path& p) {
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw IoError(p.string() + ": write failed");
}

std::uint64_t elements_of(const Coord& s) {
  std::uint64_t n = 1;
  for (auto v : s) n *= v;
  return n;
}

fs::path temp_name(const fs::path& p) { return fs::path(p.string() + ".partial"); }

void commit_file(std::ofstream& f, const fs::path& tmp, const fs::path& p) {
  f.close();
  if (!f) throw IoError(tmp.string() + ": write failed");
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw IoError(p.string() + ": " + ec.message());
}

}  // namespace

std::uint64_t ChunkedFileHeader::header_bytes() const {
  const std::uint64_t d = md.num_dims();
  return 4 + 4 + 3 + d * 24 + md.num_chunks() * 8;
}

std::vector<std::byte> ChunkedFileHeader::encode() const {
  md.validate();
  embedding.validate(md);
  if (offsets.size() != md.num_chunks()) throw InvalidArgument("offset table does not match the chunk grid");
  std::vector<std::byte> out;
  out.reserve(header_bytes());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put<std::uint32_t>(out, kChunkedFileVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(md.dtype.kind));
  put<std::uint8_t>(out, md.dtype.lanes);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(md.num_dims()));
  for (auto s : md.size) put<std::uint64_t>(out, s);
  for (auto c : md.chunk_size) put<std::uint64_t>(out, c);
  for (auto s : embedding.spacing) put<double>(out, s);
  for (auto o : offsets) put<std::uint64_t>(out, o);
  return out;
}

ChunkedFileHeader ChunkedFileHeader::decode(std::span<const std::byte> bytes, const std::string& path) {
  Reader r(bytes, path);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a chunked tensor file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kChunkedFileVersion)
    throw FormatError(path + ": unsupported chunked-file version " + std::to_string(version));
  const auto kind = r.get<std::uint8_t>();
  const auto lanes = r.get<std::uint8_t>();
  const auto d = r.get<std::uint8_t>();
  ChunkedFileHeader h;
  h.md.dtype = DataType{static_cast<ScalarKind>(kind), lanes};
  if (!h.md.dtype.valid()) throw FormatError(path + ": invalid element type");
  if (d == 0) throw FormatError(path + ": zero dimensions");
  for (int i = 0; i < d; ++i) h.md.size.push_back(r.get<std::uint64_t>());
  for (int i = 0; i < d; ++i) h.md.chunk_size.push_back(r.get<std::uint64_t>());
  for (int i = 0; i < d; ++i) h.embedding.spacing.push_back(r.get<double>());
  try {
    h.md.validate();
    h.embedding.validate(h.md);
  } catch (const Error& e) {
    throw FormatError(path + ": " + e.what());
  }
  const std::uint64_t n = h.md.num_chunks();
  if (n > (bytes.size() - r.pos()) / 8) throw FormatError(path + ": truncated offset table");
  h.offsets.resize(n);
  for (auto& o : h.offsets) o = r.get<std::uint64_t>();
  return h;
}

ChunkedFileHeader read_chunked_header(const fs::path& path) {
  const std::uint64_t size = size_of_file(path);
  FileHandle f(path);
  // The fixed part tells how large the whole header is.
  std::vector<std::byte> fixed(std::min<std::uint64_t>(size, 11));
  f.read_at(0, fixed);
  if (fixed.size() < 4 || std::memcmp(fixed.data(), kMagic, 4) != 0)
    throw FormatError(path.string() + ": not a chunked tensor file (bad magic)");
  if (fixed.size() < 11) throw FormatError(path.string() + ": truncated chunked-file header");
  const auto d = static_cast<std::uint64_t>(fixed[10]);
  std::vector<std::byte> head(std::min<std::uint64_t>(size, 11 + d * 24));
  f.read_at(0, head);
  std::uint64_t chunks = 1;
  if (head.size() == 11 + d * 24) {
    for (std::uint64_t i = 0; i < d; ++i) {
      std::uint64_t s, c;
      std::memcpy(&s, head.data() + 11 + i * 8, 8);
      std::memcpy(&c, head.data() + 11 + d * 8 + i * 8, 8);
      if (c == 0) throw FormatError(path.string() + ": zero chunk size");
      const std::uint64_t g = (s + c - 1) / c;
      if (g != 0 && chunks > size / g) throw FormatError(path.string() + ": truncated offset table");
      chunks *= g;
    }
  }
  std::vector<std::byte> all(std::min<std::uint64_t>(size, 11 + d * 24 + chunks * 8));
  f.read_at(0, all);
  ChunkedFileHeader h = ChunkedFileHeader::decode(all, path.string());
  const std::uint64_t cb = h.md.chunk_bytes();
  for (auto o : h.offsets)
    if (o != 0 && (o < h.header_bytes() || o > size || size - o < cb))
      throw FormatError(path.string() + ": chunk payload outside the file (truncated?)");
  return h;
}

void import_raw(const fs::path& raw, const fs::path& out, const TensorMetaData& md, const EmbeddingData& embedding) {
  md.validate();
  embedding.validate(md);
  const std::uint64_t expected = elements_of(md.size) * md.dtype.size();
  const std::uint64_t actual = size_of_file(raw);
  if (actual != expected)
    throw ShapeMismatch(raw.string() + ": file has " + std::to_string(actual) + " bytes, shape " +
                        to_string(md.size) + " of " + md.dtype.name() + " needs " + std::to_string(expected));
  FileHandle in(raw);
  ChunkedFileHeader h{md, embedding, {}};
  const std::uint64_t cb = md.chunk_bytes();
  for (std::uint64_t i = 0; i < md.num_chunks(); ++i) h.offsets.push_back(h.header_bytes() + i * cb);
  const fs::path tmp = temp_name(out);
  std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(tmp.string() + ": cannot create");
  const auto head = h.encode();
  write_all(f, head.data(), head.size(), tmp);

  const std::size_t d = md.num_dims();
  const std::size_t es = md.dtype.size();
  const Coord src_strides = row_major_strides(md.size);
  std::vector<std::byte> chunk(cb);
  for (std::uint64_t i = 0; i < md.num_chunks(); ++i) {
    std::memset(chunk.data(), 0, chunk.size());
    const Region r = chunk_logical_region(md, delinearize(md.chunk_grid(), i));
    const Coord shape = detail::shape_of(r);
    // One read per contiguous row of the chunk along the last dimension.
    const Coord rows_shape(shape.begin(), shape.end() - 1);
    const std::uint64_t rows = d == 1 ? 1 : elements_of(rows_shape);
    for (std::uint64_t j = 0; j < rows; ++j) {
      Coord p = d == 1 ? Coord{} : delinearize(rows_shape, j);
      p.push_back(0);
      std::uint64_t src = 0, dst = 0;
      for (std::size_t k = 0; k < d; ++k) {
        src += (r.begin[k] + p[k]) * src_strides[k];
        dst = dst * md.chunk_size[k] + p[k];
      }
      in.read_at(src * es, std::span<std::byte>(chunk.data() + dst * es, shape[d - 1] * es));
    }
    write_all(f, chunk.data(), chunk.size(), tmp);
  }
  commit_file(f, tmp, out);
}

OperatorPtr open_chunked(const fs::path& path) {
  ChunkedFileHeader h = read_chunked_header(path);
  auto file = std::make_shared<const FileHandle>(path);
  std::error_code ec;
  const auto mtime = fs::last_write_time(path, ec);
  ParamWriter w;
  w.str(fs::absolute(path).lexically_normal().string())
      .u64(size_of_file(path))
      .i64(ec ? 0 : static_cast<std::int64_t>(mtime.time_since_epoch().count()))
      .id(content_digest(h.encode()));
  return std::make_shared<ChunkedFileSource>(std::move(file), std::move(h), std::move(w).take());
}

void save_tensor(Runtime& rt, const OperatorPtr& node, const fs::path& path, SaveOptions opts) {
  if (!node) throw InvalidArgument("save of a null node");
  const TensorMetaData& md = node->metadata();
  md.validate();
  ChunkedFileHeader h{md, node->embedding(), {}};
  const std::uint64_t cb = md.chunk_bytes();
  const std::uint64_t n = md.num_chunks();
  for (std::uint64_t i = 0; i < n; ++i) h.offsets.push_back(h.header_bytes() + i * cb);
  std::size_t batch = opts.chunks_per_batch;
  if (batch == 0)
    batch = static_cast<std::size_t>(std::max<std::uint64_t>(1, rt.config().ram.capacity_bytes / 4 / cb));
  const fs::path tmp = temp_name(path);
  std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(tmp.string() + ": cannot create");
  const auto head = h.encode();
  write_all(f, head.data(), head.size(), tmp);
  try {
    for (std::uint64_t first = 0; first < n; first += batch) {
      std::vector<Coord> pos;
      for (std::uint64_t i = first; i < std::min<std::uint64_t>(n, first + batch); ++i)
        pos.push_back(delinearize(md.chunk_grid(), i));
      const auto chunks = rt.resolve(node, pos);
      for (const auto& c : chunks) write_all(f, c.data.data(), c.data.size(), tmp);
    }
    commit_file(f, tmp, path);
  } catch (...) {
    f.close();
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

}  // namespace chunkflow
