// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/chunk_model.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace chunkflow {

std::string to_string(const Coord& c) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < c.size(); ++i) os << (i ? "," : "") << c[i];
  os << ']';
  return os.str();
}

std::string DataType::name() const {
  static constexpr const char* names[] = {"u8", "i16", "u16", "f32", "f64"};
  std::string s = names[static_cast<int>(kind)];
  if (lanes > 1) s += "x" + std::to_string(lanes);
  return s;
}

DataType DataType::parse(const std::string& s) {
  static constexpr const char* names[] = {"u8", "i16", "u16", "f32", "f64"};
  std::string base = s;
  std::uint8_t lanes = 1;
  if (auto x = s.find('x'); x != std::string::npos) {
    base = s.substr(0, x);
    const int n = std::stoi(s.substr(x + 1));
    if (n < 1 || n > 4) throw InvalidArgument("lane count must be 1..4 in '" + s + "'");
    lanes = static_cast<std::uint8_t>(n);
  }
  for (int k = 0; k < 5; ++k) {
    if (base == names[k]) return {static_cast<ScalarKind>(k), lanes};
  }
  throw InvalidArgument("unknown element type '" + s + "'");
}

TensorMetaData::TensorMetaData(Coord size_, Coord chunk_size_, DataType dtype_)
    : size(std::move(size_)), chunk_size(std::move(chunk_size_)), dtype(dtype_) {
  validate();
}

void TensorMetaData::validate() const {
  if (size.empty()) throw InvalidArgument("tensor must have at least one dimension");
  if (chunk_size.size() != size.size())
    throw ShapeMismatch("chunk size " + to_string(chunk_size) + " does not match rank of size " +
                        to_string(size));
  for (std::size_t i = 0; i < size.size(); ++i) {
    if (size[i] == 0 || chunk_size[i] == 0)
      throw InvalidArgument("sizes must be positive: size " + to_string(size) + ", chunk " +
                            to_string(chunk_size));
  }
  if (!dtype.valid()) throw InvalidArgument("invalid element type");
}

Coord TensorMetaData::chunk_grid() const {
  Coord g(size.size());
  for (std::size_t i = 0; i < size.size(); ++i) g[i] = (size[i] + chunk_size[i] - 1) / chunk_size[i];
  return g;
}

std::uint64_t TensorMetaData::num_chunks() const {
  std::uint64_t n = 1;
  for (auto g : chunk_grid()) n *= g;
  return n;
}

std::uint64_t TensorMetaData::chunk_elements() const {
  std::uint64_t n = 1;
  for (auto c : chunk_size) n *= c;
  return n;
}

bool TensorMetaData::contains_chunk(const Coord& h) const {
  if (h.size() != size.size()) return false;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] * chunk_size[i] >= size[i]) return false;
  }
  return true;
}

void EmbeddingData::validate(const TensorMetaData& md) const {
  if (spacing.size() != md.num_dims())
    throw ShapeMismatch("spacing rank " + std::to_string(spacing.size()) + " != tensor rank " +
                        std::to_string(md.num_dims()));
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("spacing must be finite and positive");
  }
}

std::vector<double> EmbeddingData::physical_size(const TensorMetaData& md) const {
  std::vector<double> p(spacing.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = spacing[i] * static_cast<double>(md.size[i]);
  return p;
}

double EmbeddingData::min_spacing() const {
  return *std::min_element(spacing.begin(), spacing.end());
}

std::uint64_t Region::volume() const {
  std::uint64_t v = 1;
  for (std::size_t i = 0; i < begin.size(); ++i) v *= end[i] - begin[i];
  return v;
}

Coord chunk_grid_dims(const TensorMetaData& md) { return md.chunk_grid(); }

ChunkCoords global_to_chunk(const TensorMetaData& md, std::span<const std::uint64_t> g) {
  if (g.size() != md.num_dims())
    throw InvalidCoordinate("position rank " + std::to_string(g.size()) + " != tensor rank " +
                            std::to_string(md.num_dims()));
  ChunkCoords out{Coord(g.size()), Coord(g.size())};
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] >= md.size[i])
      throw InvalidCoordinate("position " + to_string(Coord(g.begin(), g.end())) +
                              " outside tensor of size " + to_string(md.size));
    out.chunk_pos[i] = g[i] / md.chunk_size[i];
    out.local_pos[i] = g[i] % md.chunk_size[i];
  }
  return out;
}

Region chunk_logical_region(const TensorMetaData& md, const Coord& h) {
  if (!md.contains_chunk(h))
    throw InvalidCoordinate("chunk " + to_string(h) + " outside chunk grid " +
                            to_string(md.chunk_grid()));
  Region r{Coord(h.size()), Coord(h.size())};
  for (std::size_t i = 0; i < h.size(); ++i) {
    r.begin[i] = h[i] * md.chunk_size[i];
    r.end[i] = std::min(r.begin[i] + md.chunk_size[i], md.size[i]);
  }
  return r;
}

Coord row_major_strides(const Coord& shape) {
  Coord s(shape.size());
  std::uint64_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

std::uint64_t linearize(const Coord& grid, const Coord& h) {
  std::uint64_t idx = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) idx = idx * grid[i] + h[i];
  return idx;
}

Coord delinearize(const Coord& grid, std::uint64_t index) {
  Coord h(grid.size());
  for (std::size_t i = grid.size(); i-- > 0;) {
    h[i] = index % grid[i];
    index /= grid[i];
  }
  return h;
}

void zero_chunk_padding(const TensorMetaData& md, const Coord& h, std::span<std::byte> chunk) {
  const Region r = chunk_logical_region(md, h);
  const std::size_t d = md.num_dims();
  Coord valid(d);
  bool full = true;
  for (std::size_t i = 0; i < d; ++i) {
    valid[i] = r.end[i] - r.begin[i];
    full = full && valid[i] == md.chunk_size[i];
  }
  if (full) return;
  const std::size_t esize = md.dtype.size();
  // Walk every row (all dims but the last); rows past the valid extent are zeroed whole.
  const std::uint64_t rows = md.chunk_elements() / md.chunk_size[d - 1];
  const std::uint64_t row_len = md.chunk_size[d - 1];
  for (std::uint64_t row = 0; row < rows; ++row) {
    bool inside = true;
    std::uint64_t rem = row;
    for (std::size_t i = d - 1; i-- > 0;) {
      const std::uint64_t c = rem % md.chunk_size[i];
      rem /= md.chunk_size[i];
      if (c >= valid[i]) inside = false;
    }
    std::byte* base = chunk.data() + row * row_len * esize;
    if (!inside) {
      std::fill(base, base + row_len * esize, std::byte{0});
    } else if (valid[d - 1] < row_len) {
      std::fill(base + valid[d - 1] * esize, base + row_len * esize, std::byte{0});
    }
  }
}

std::string Id128::hex() const {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(32, '0');
  for (std::size_t i = 0; i < 16; ++i) {
    s[2 * i] = digits[bytes[i] >> 4];
    s[2 * i + 1] = digits[bytes[i] & 0xF];
  }
  return s;
}

std::uint64_t Id128::lo() const {
  std::uint64_t v;
  std::memcpy(&v, bytes.data(), 8);
  return v;
}

std::uint64_t Id128::hi() const {
  std::uint64_t v;
  std::memcpy(&v, bytes.data() + 8, 8);
  return v;
}

ParamWriter& ParamWriter::u8(std::uint8_t v) {
  buf_.push_back(static_cast<std::byte>(v));
  return *this;
}

ParamWriter& ParamWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  return *this;
}

ParamWriter& ParamWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
  return *this;
}

ParamWriter& ParamWriter::i64(std::int64_t v) { return u64(static_cast<std::uint64_t>(v)); }

ParamWriter& ParamWriter::f64(double v) { return u64(std::bit_cast<std::uint64_t>(v)); }

ParamWriter& ParamWriter::str(std::string_view s) {
  u64(s.size());
  for (char c : s) buf_.push_back(static_cast<std::byte>(c));
  return *this;
}

ParamWriter& ParamWriter::bytes(std::span<const std::byte> b) {
  u64(b.size());
  buf_.insert(buf_.end(), b.begin(), b.end());
  return *this;
}

ParamWriter& ParamWriter::coord(const Coord& c) {
  u64(c.size());
  for (auto v : c) u64(v);
  return *this;
}

ParamWriter& ParamWriter::reals(std::span<const double> v) {
  u64(v.size());
  for (double x : v) f64(x);
  return *this;
}

ParamWriter& ParamWriter::dtype(DataType t) {
  u8(static_cast<std::uint8_t>(t.kind));
  return u8(t.lanes);
}

ParamWriter& ParamWriter::id(const Id128& id) {
  for (auto b : id.bytes) buf_.push_back(static_cast<std::byte>(b));
  return *this;
}

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw Error("SHA-256 initialisation failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx_, p, n); }
  void u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    update(b, 8);
  }
  void enc(const void* p, std::size_t n) {
    u64(n);
    update(p, n);
  }
  Id128 finish_128() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    Id128 id;
    std::copy_n(md, 16, id.bytes.begin());
    return id;
  }

 private:
  EVP_MD_CTX* ctx_;
};

constexpr std::string_view kOpDomain = "chunkflow.op.v1";
constexpr std::string_view kChunkDomain = "chunkflow.chunk.v1";
constexpr std::string_view kDataDomain = "chunkflow.data.v1";

}  // namespace

OperatorId operator_id(std::string_view name, std::span<const std::byte> params,
                       std::span<const OperatorId> inputs) {
  Sha256 h;
  h.enc(kOpDomain.data(), kOpDomain.size());
  h.enc(name.data(), name.size());
  h.enc(params.data(), params.size());
  h.u64(inputs.size());
  for (const auto& in : inputs) h.update(in.value.bytes.data(), 16);
  return OperatorId{h.finish_128()};
}

ChunkId chunk_id(const OperatorId& op, std::span<const std::uint64_t> pos) {
  Sha256 h;
  h.enc(kChunkDomain.data(), kChunkDomain.size());
  h.update(op.value.bytes.data(), 16);
  h.u64(pos.size());
  for (auto v : pos) h.u64(v);
  return ChunkId{h.finish_128()};
}

Id128 content_digest(std::span<const std::byte> data) {
  Sha256 h;
  h.enc(kDataDomain.data(), kDataDomain.size());
  h.enc(data.data(), data.size());
  return h.finish_128();
}

}  // namespace chunkflow
