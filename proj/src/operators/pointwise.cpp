// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <map>

#include "common.hpp"

namespace chunkflow {

using Op = Expr::Op;

namespace {

std::shared_ptr<const Expr::Node> make(Op op, std::vector<std::shared_ptr<const Expr::Node>> args) {
  auto n = std::make_shared<Expr::Node>();
  n->op = op;
  n->args = std::move(args);
  return n;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Abs: return "abs";
    case Op::Min: return "min";
    case Op::Max: return "max";
    case Op::Cast: return "cast";
  }
  return "?";
}

struct Instr {
  Op op = Op::Const;
  std::uint32_t a = 0, b = 0;  // argument instructions
  std::uint32_t leaf = 0;      // Input
  double value = 0;            // Const
  std::optional<DataType> type;
  std::uint8_t lanes = 1;
};

struct Program {
  std::vector<Instr> code;  // topological; the last instruction is the result
  std::vector<OperatorPtr> leaves;

  std::vector<std::byte> encode() const {
    ParamWriter w;
    w.u64(code.size());
    for (const auto& i : code) {
      w.u8(static_cast<std::uint8_t>(i.op)).u32(i.a).u32(i.b).u32(i.leaf).f64(i.value);
      w.u8(i.type ? 1 : 0);
      if (i.type) w.dtype(*i.type);
    }
    return std::move(w).take();
  }
};

class PointwiseOp;

class Compiler {
 public:
  explicit Compiler(bool fuse) : fuse_(fuse) {}

  std::uint32_t compile(const std::shared_ptr<const Expr::Node>& n);
  Program take() && { return std::move(p_); }

 private:
  std::uint32_t emit(Instr in) {
    p_.code.push_back(in);
    return static_cast<std::uint32_t>(p_.code.size() - 1);
  }
  std::uint32_t add_leaf(const OperatorPtr& op);
  std::uint32_t splice(const Program& inner);

  bool fuse_;
  Program p_;
  std::map<const Expr::Node*, std::uint32_t> seen_;
  std::map<OperatorId, std::uint32_t> leaf_instr_;
};

class PointwiseOp : public OperatorBase<PointwiseOp> {
 public:
  PointwiseOp(Program p, TensorMetaData md, EmbeddingData emb)
      : OperatorBase("pointwise", p.encode(), p.leaves, md, emb), prog_(std::move(p)) {}

  const Program& program() const { return prog_; }

  std::optional<double> known_uniform() const override {
    std::vector<double> leaf_values;
    for (const auto& l : prog_.leaves) {
      auto u = l->known_uniform();
      if (!u) return std::nullopt;
      leaf_values.push_back(*u);
    }
    std::vector<std::array<double, 4>> regs(prog_.code.size());
    evaluate(regs, [&](std::uint32_t leaf, std::size_t) { return leaf_values[leaf]; });
    return regs.back()[0];
  }

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    const TensorMetaData& md = metadata();
    if (const auto u = known_uniform()) {
      for (const auto& h : positions) {
        Allocation out = co_await ctx.allocate_output();
        auto bytes = out.bytes();
        co_await ctx.run([&md, &h, v = *u, bytes] { detail::fill_uniform(md, h, v, bytes); });
        ctx.commit(h, std::move(out));
      }
      co_return;
    }
    std::vector<std::vector<ChunkRef>> in(prog_.leaves.size());
    for (std::size_t l = 0; l < prog_.leaves.size(); ++l)
      in[l] = co_await ctx.request(prog_.leaves[l], positions);
    std::vector<Allocation> outs;
    outs.reserve(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) outs.push_back(co_await ctx.allocate_output());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      std::vector<std::span<const std::byte>> chunks;
      for (const auto& v : in) chunks.push_back(v[i].bytes());
      auto bytes = outs[i].bytes();
      const Coord& h = positions[i];
      jobs.push_back([this, chunks = std::move(chunks), bytes, &h] { run_chunk(chunks, bytes, h); });
    }
    co_await ctx.run_all(std::move(jobs));
    for (std::size_t i = 0; i < positions.size(); ++i) ctx.commit(positions[i], std::move(outs[i]));
  }

  template <class LeafValue>
  void evaluate(std::vector<std::array<double, 4>>& regs, const LeafValue& leaf_value) const {
    for (std::size_t k = 0; k < prog_.code.size(); ++k) {
      const Instr& in = prog_.code[k];
      auto& r = regs[k];
      auto arg = [&](std::uint32_t idx, std::size_t lane) {
        return prog_.code[idx].lanes == 1 ? regs[idx][0] : regs[idx][lane];
      };
      for (std::size_t l = 0; l < in.lanes; ++l) {
        double v = 0;
        switch (in.op) {
          case Op::Input: v = leaf_value(in.leaf, l); break;
          case Op::Const: v = in.value; break;
          case Op::Add: v = arg(in.a, l) + arg(in.b, l); break;
          case Op::Sub: v = arg(in.a, l) - arg(in.b, l); break;
          case Op::Mul: v = arg(in.a, l) * arg(in.b, l); break;
          case Op::Div: v = arg(in.a, l) / arg(in.b, l); break;
          case Op::Abs: v = std::fabs(arg(in.a, l)); break;
          case Op::Min: v = std::min(arg(in.a, l), arg(in.b, l)); break;
          case Op::Max: v = std::max(arg(in.a, l), arg(in.b, l)); break;
          case Op::Cast: v = arg(in.a, l); break;
        }
        r[l] = in.type ? round_to(in.type->kind, v) : v;
      }
    }
  }

 private:
  void run_chunk(const std::vector<std::span<const std::byte>>& chunks, std::span<std::byte> out,
                 const Coord& h) const {
    const TensorMetaData& md = metadata();
    const std::uint64_t n = md.chunk_elements();
    std::vector<DataType> leaf_types;
    for (const auto& l : prog_.leaves) leaf_types.push_back(l->metadata().dtype);
    std::vector<std::array<double, 4>> regs(prog_.code.size());
    const std::size_t out_ss = scalar_size(md.dtype.kind);
    for (std::uint64_t e = 0; e < n; ++e) {
      evaluate(regs, [&](std::uint32_t leaf, std::size_t lane) {
        const DataType t = leaf_types[leaf];
        const std::size_t ss = scalar_size(t.kind);
        return load_scalar(chunks[leaf].data() + e * t.size() + lane * ss, t.kind);
      });
      const auto& r = regs.back();
      std::byte* p = out.data() + e * md.dtype.size();
      for (std::size_t l = 0; l < md.dtype.lanes; ++l) store_scalar(p + l * out_ss, md.dtype.kind, r[l]);
    }
    zero_chunk_padding(md, h, out);
  }

  Program prog_;
};

std::uint32_t Compiler::add_leaf(const OperatorPtr& op) {
  if (fuse_ && !op->location_override()) {
    if (const auto* pw = dynamic_cast<const PointwiseOp*>(op.get())) return splice(pw->program());
  }
  auto it = leaf_instr_.find(op->id());
  if (it != leaf_instr_.end()) return it->second;
  const auto leaf = static_cast<std::uint32_t>(p_.leaves.size());
  p_.leaves.push_back(op);
  Instr in;
  in.op = Op::Input;
  in.leaf = leaf;
  in.type = op->metadata().dtype;
  in.lanes = op->metadata().dtype.lanes;
  const auto idx = emit(in);
  leaf_instr_.emplace(op->id(), idx);
  return idx;
}

std::uint32_t Compiler::splice(const Program& inner) {
  std::vector<std::uint32_t> map(inner.code.size());
  for (std::size_t k = 0; k < inner.code.size(); ++k) {
    Instr in = inner.code[k];
    if (in.op == Op::Input) {
      map[k] = add_leaf(inner.leaves[in.leaf]);
      continue;
    }
    in.a = map[in.a];
    in.b = map[in.b];
    map[k] = emit(in);
  }
  return map.back();
}

std::uint32_t Compiler::compile(const std::shared_ptr<const Expr::Node>& n) {
  if (auto it = seen_.find(n.get()); it != seen_.end()) return it->second;
  std::uint32_t idx = 0;
  if (n->op == Op::Input) {
    idx = add_leaf(n->input);
  } else if (n->op == Op::Const) {
    Instr in;
    in.op = Op::Const;
    in.value = n->value;
    idx = emit(in);
  } else {
    Instr in;
    in.op = n->op;
    in.a = compile(n->args.at(0));
    const Instr& a = p_.code[in.a];
    if (n->op == Op::Abs) {
      in.type = a.type;
      in.lanes = a.lanes;
    } else if (n->op == Op::Cast) {
      if (!n->cast_to.valid()) throw InvalidArgument("cast to an invalid element type");
      if (a.type && a.lanes != n->cast_to.lanes && a.lanes != 1)
        throw TypeMismatch("cast from " + a.type->name() + " to " + n->cast_to.name() +
                           " changes the lane count");
      in.type = n->cast_to;
      in.lanes = n->cast_to.lanes;
    } else {
      in.b = compile(n->args.at(1));
      const Instr& a2 = p_.code[in.a];
      const Instr& b = p_.code[in.b];
      if (a2.type && b.type && *a2.type != *b.type)
        throw TypeMismatch(std::string(op_name(n->op)) + " of " + a2.type->name() + " and " +
                           b.type->name() + " needs an explicit cast");
      in.type = a2.type ? a2.type : b.type;
      in.lanes = std::max(a2.lanes, b.lanes);
    }
    idx = emit(in);
  }
  seen_.emplace(n.get(), idx);
  return idx;
}

}  // namespace

Expr input(OperatorPtr op) {
  if (!op) throw InvalidArgument("pointwise input is null");
  auto n = std::make_shared<Expr::Node>();
  n->op = Op::Input;
  n->input = std::move(op);
  return Expr(n);
}

Expr constant(double v) {
  auto n = std::make_shared<Expr::Node>();
  n->op = Op::Const;
  n->value = v;
  return Expr(n);
}

Expr operator+(const Expr& a, const Expr& b) { return Expr(make(Op::Add, {a.node(), b.node()})); }
Expr operator-(const Expr& a, const Expr& b) { return Expr(make(Op::Sub, {a.node(), b.node()})); }
Expr operator*(const Expr& a, const Expr& b) { return Expr(make(Op::Mul, {a.node(), b.node()})); }
Expr operator/(const Expr& a, const Expr& b) { return Expr(make(Op::Div, {a.node(), b.node()})); }
Expr abs(const Expr& a) { return Expr(make(Op::Abs, {a.node()})); }
Expr min(const Expr& a, const Expr& b) { return Expr(make(Op::Min, {a.node(), b.node()})); }
Expr max(const Expr& a, const Expr& b) { return Expr(make(Op::Max, {a.node(), b.node()})); }

Expr cast(const Expr& a, DataType t) {
  auto n = std::make_shared<Expr::Node>();
  n->op = Op::Cast;
  n->cast_to = t;
  n->args = {a.node()};
  return Expr(n);
}

Expr Expr::abs() const { return chunkflow::abs(*this); }
Expr Expr::cast(DataType t) const { return chunkflow::cast(*this, t); }

OperatorPtr pointwise(const Expr& e, bool fuse) {
  Compiler c(fuse);
  c.compile(e.node());
  Program p = std::move(c).take();
  if (p.leaves.empty()) throw InvalidArgument("pointwise expression without tensor inputs");
  const Instr& root = p.code.back();
  if (!root.type) throw TypeMismatch("pointwise expression has no element type");
  const TensorMetaData& first = p.leaves.front()->metadata();
  for (const auto& l : p.leaves) {
    const TensorMetaData& md = l->metadata();
    if (md.size != first.size || md.chunk_size != first.chunk_size)
      throw ShapeMismatch("pointwise inputs " + p.leaves.front()->label() + " and " + l->label() +
                          " differ in size or chunking");
  }
  TensorMetaData md(first.size, first.chunk_size, *root.type);
  EmbeddingData emb = p.leaves.front()->embedding();
  return std::make_shared<PointwiseOp>(std::move(p), std::move(md), std::move(emb));
}

OperatorPtr cast(const OperatorPtr& in, DataType t) { return pointwise(input(in).cast(t)); }

std::size_t fused_op_count(const Operator& op) {
  const auto* pw = dynamic_cast<const PointwiseOp*>(&op);
  if (!pw) return 0;
  return static_cast<std::size_t>(std::count_if(pw->program().code.begin(), pw->program().code.end(),
                                                [](const Instr& i) { return i.op != Op::Input && i.op != Op::Const; }));
}

}  // namespace chunkflow
