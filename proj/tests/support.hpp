#pragma once

#include <cstdint>
#include <vector>

#include <random>

#include "pcfg/cfg.hpp"
#include "pcfg/image.hpp"
#include "pcfg/serial_ops.hpp"

namespace pcfg::test {

// Hand assembler for small test images. Every emitter returns the address of
// the instruction it wrote.
struct Code {
  Address base;
  std::vector<std::uint8_t> bytes;

  explicit Code(Address b = 0x1000) : base(b) {}

  Address here() const { return base + bytes.size(); }
  Address emit(const Instruction& i) {
    Address a = here();
    encode(i, bytes);
    return a;
  }
  Address op(InstrKind k) { return emit(Instruction::make(k)); }
  Address alu(int n = 1) {
    Address a = here();
    for (int i = 0; i < n; ++i) op(InstrKind::Alu);
    return a;
  }
  Address jmp(Address t) { return emit(Instruction::branch(InstrKind::JmpDirect, t)); }
  Address jcc(Address t) { return emit(Instruction::branch(InstrKind::JccDirect, t)); }
  Address call(Address t) { return emit(Instruction::branch(InstrKind::Call, t)); }
  Address hint(std::uint16_t v) { return emit(Instruction::bound_hint(v)); }
  Address ijmp(Address table, std::uint16_t bound) {
    return emit(Instruction::ijmp_table(table, bound));
  }
  Address ret() { return op(InstrKind::Ret); }
  Address halt() { return op(InstrKind::Halt); }

  // Rewrites the target of the branch at `insn`.
  void patch(Address insn, Address target) {
    auto off = insn - base + 1;
    for (int i = 0; i < 4; ++i) bytes[off + i] = (target >> (8 * i)) & 0xff;
  }
};

inline std::vector<std::uint8_t> words(const std::vector<std::uint32_t>& ws) {
  std::vector<std::uint8_t> out;
  for (auto w : ws)
    for (int i = 0; i < 4; ++i) out.push_back((w >> (8 * i)) & 0xff);
  return out;
}

inline SymbolEntry fn(Address a, const std::string& name, bool noreturn = false) {
  return SymbolEntry::make(a, name, SymbolKind::Func, noreturn);
}

inline Image image_of(const Code& c, std::vector<SymbolEntry> syms,
                      std::vector<std::uint8_t> data = {},
                      Address data_base = 0x8000) {
  return Image(c.base, c.bytes, data_base, std::move(data), std::move(syms));
}

// Resolves candidate t and, when its block has a direct or table terminator,
// creates that block's edges.
inline void expand(Cfg& g, const Image& img, Address t) {
  apply_ber(g, img, t);
  const Block* b = g.block_at(t);
  if (!b || !b->terminator) return;
  switch (b->terminator->kind) {
    case InstrKind::JmpDirect:
    case InstrKind::JccDirect:
    case InstrKind::Call:
      apply_dec(g, img, t);
      break;
    case InstrKind::IJmpTable:
      apply_iec(g, img, t);
      break;
    default:
      break;
  }
}

// A graph part-way through construction: up to `steps` random candidates
// resolved from G0. No call fall-through edges are created.
inline Cfg random_partial(const Image& img, std::mt19937_64& rng, int steps) {
  Cfg g = initial_graph(img);
  for (int i = 0; i < steps && !g.candidates().empty(); ++i) {
    auto it = g.candidates().begin();
    std::advance(it, rng() % g.candidates().size());
    expand(g, img, *it);
  }
  return g;
}

// Every candidate resolved, in address order.
inline Cfg traverse_all(const Image& img) {
  Cfg g = initial_graph(img);
  while (!g.candidates().empty()) expand(g, img, *g.candidates().begin());
  return g;
}

template <class Set>
auto pick(const Set& s, std::mt19937_64& rng) {
  auto it = s.begin();
  std::advance(it, rng() % s.size());
  return *it;
}

}  // namespace pcfg::test
