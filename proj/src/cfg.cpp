#include "pcfg/cfg.hpp"

#include <algorithm>
#include <sstream>

namespace pcfg {

const char* to_string(EdgeKind k) {
  switch (k) {
    case EdgeKind::Direct: return "Direct";
    case EdgeKind::CondTaken: return "CondTaken";
    case EdgeKind::CondFallthrough: return "CondFallthrough";
    case EdgeKind::Call: return "Call";
    case EdgeKind::CallFallthrough: return "CallFallthrough";
    case EdgeKind::Return: return "Return";
    case EdgeKind::IndirectResolved: return "IndirectResolved";
    case EdgeKind::TailCall: return "TailCall";
    case EdgeKind::Fallthrough: return "Fallthrough";
  }
  return "?";
}

std::optional<EdgeKind> parse_edge_kind(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(EdgeKind::Fallthrough); ++i) {
    auto k = static_cast<EdgeKind>(i);
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

const char* to_string(ReturnStatus s) {
  switch (s) {
    case ReturnStatus::Unset: return "UNSET";
    case ReturnStatus::Return: return "RETURN";
    case ReturnStatus::NoReturn: return "NORETURN";
  }
  return "?";
}

// ---- Cfg ----

const Block* Cfg::block_at(Address start) const {
  auto it = blocks_.find(start);
  return it == blocks_.end() ? nullptr : &it->second;
}

const Block* Cfg::block_containing(Address a) const {
  auto it = blocks_.upper_bound(a);
  if (it == blocks_.begin()) return nullptr;
  --it;
  const Block& b = it->second;
  return (b.start <= a && a < b.end) ? &b : nullptr;
}

const Block* Cfg::block_ending_at(Address end) const {
  if (end == 0) return nullptr;
  const Block* b = block_containing(end - 1);
  return (b && b->end == end) ? b : nullptr;
}

const Block* Cfg::next_block_after(Address a) const {
  auto it = blocks_.upper_bound(a);
  return it == blocks_.end() ? nullptr : &it->second;
}

void Cfg::add_block(Block b) { blocks_.emplace(b.start, std::move(b)); }

void Cfg::remove_block(Address start) { blocks_.erase(start); }

void Cfg::set_block_end(Address start, Address end) {
  auto it = blocks_.find(start);
  if (it == blocks_.end()) throw InvalidGraph("no block at " + hex(start));
  it->second.end = end;
}

void Cfg::set_terminator(Address start, std::optional<Instruction> t) {
  auto it = blocks_.find(start);
  if (it == blocks_.end()) throw InvalidGraph("no block at " + hex(start));
  it->second.terminator = t;
}

bool Cfg::add_edge(const Edge& e) {
  if (!edges_.insert(e).second) return false;
  in_.insert(e);
  return true;
}

bool Cfg::remove_edge(const Edge& e) {
  if (edges_.erase(e) == 0) return false;
  in_.erase(e);
  return true;
}

std::vector<Edge> Cfg::out_edges(Address source) const {
  std::vector<Edge> out;
  for (auto it = edges_.lower_bound(Edge{source, 0, EdgeKind::Direct});
       it != edges_.end() && it->source == source; ++it)
    out.push_back(*it);
  return out;
}

std::vector<Edge> Cfg::in_edges(Address target) const {
  std::vector<Edge> out;
  for (auto it = in_.lower_bound(Edge{0, target, EdgeKind::Direct});
       it != in_.end() && it->target == target; ++it)
    out.push_back(*it);
  return out;
}

std::size_t Cfg::in_degree(Address target) const {
  std::size_t n = 0;
  for (auto it = in_.lower_bound(Edge{0, target, EdgeKind::Direct});
       it != in_.end() && it->target == target; ++it)
    ++n;
  return n;
}

bool Cfg::add_entry(FunctionEntry f) {
  return entries_.emplace(f.entry, std::move(f)).second;
}

FunctionEntry* Cfg::entry(Address a) {
  auto it = entries_.find(a);
  return it == entries_.end() ? nullptr : &it->second;
}

const FunctionEntry* Cfg::entry(Address a) const {
  auto it = entries_.find(a);
  return it == entries_.end() ? nullptr : &it->second;
}

bool Cfg::operator==(const Cfg& o) const {
  if (blocks_.size() != o.blocks_.size() || candidates_ != o.candidates_ ||
      edges_ != o.edges_ || entries_.size() != o.entries_.size())
    return false;
  for (auto a = blocks_.begin(), b = o.blocks_.begin(); a != blocks_.end();
       ++a, ++b)
    if (a->second.start != b->second.start || a->second.end != b->second.end)
      return false;
  for (auto a = entries_.begin(), b = o.entries_.begin(); a != entries_.end();
       ++a, ++b)
    if (a->first != b->first || a->second.status != b->second.status ||
        a->second.seed != b->second.seed)
      return false;
  return true;
}

// ---- validation ----

const char* to_string(Violation::Kind k) {
  using K = Violation::Kind;
  switch (k) {
    case K::EmptyBlock: return "EmptyBlock";
    case K::DuplicateBlockStart: return "DuplicateBlockStart";
    case K::DuplicateBlockEnd: return "DuplicateBlockEnd";
    case K::OverlappingBlocks: return "OverlappingBlocks";
    case K::CandidateIsBlock: return "CandidateIsBlock";
    case K::DanglingEdgeSource: return "DanglingEdgeSource";
    case K::DanglingEdgeTarget: return "DanglingEdgeTarget";
    case K::CallFallthroughTarget: return "CallFallthroughTarget";
    case K::EdgeKindMismatch: return "EdgeKindMismatch";
    case K::EntryNotNode: return "EntryNotNode";
    case K::OutsideText: return "OutsideText";
    case K::TerminatorMismatch: return "TerminatorMismatch";
    case K::InteriorControlFlow: return "InteriorControlFlow";
  }
  return "?";
}

std::string Violation::describe() const {
  std::string s = to_string(kind);
  s += '(';
  for (std::size_t i = 0; i < addrs.size(); ++i) {
    if (i) s += ", ";
    s += hex(addrs[i]);
  }
  s += ')';
  return s;
}

namespace {

bool kind_matches(EdgeKind k, const std::optional<Instruction>& t) {
  if (!t) return k == EdgeKind::Fallthrough;
  switch (k) {
    case EdgeKind::Direct:
    case EdgeKind::TailCall:
      return t->kind == InstrKind::JmpDirect || t->kind == InstrKind::JccDirect;
    case EdgeKind::CondTaken:
    case EdgeKind::CondFallthrough:
      return t->kind == InstrKind::JccDirect;
    case EdgeKind::Call:
    case EdgeKind::CallFallthrough:
      return t->kind == InstrKind::Call;
    case EdgeKind::Return:
      return t->kind == InstrKind::Ret;
    case EdgeKind::IndirectResolved:
      return t->kind == InstrKind::IJmpTable;
    case EdgeKind::Fallthrough:
      return false;
  }
  return false;
}

// The terminator synthesized when linear parsing runs off the end of text.
bool is_synthetic_halt(const Instruction& t, const Image& image) {
  return t.kind == InstrKind::Halt && t.length == 0 &&
         t.addr == image.text_end();
}

void check_against_image(const Block& b, const Image& image,
                         std::vector<Violation>& out) {
  using K = Violation::Kind;
  if (b.start < image.text_base() || b.end > image.text_end()) {
    out.push_back({K::OutsideText, {b.start, b.end}});
    return;
  }
  if (b.terminator) {
    const auto& t = *b.terminator;
    bool ok = is_synthetic_halt(t, image)
                  ? b.end == image.text_end()
                  : t.end() == b.end && t.addr >= b.start &&
                        image.in_text(t.addr) && decode(image, t.addr) == t;
    if (!ok) out.push_back({K::TerminatorMismatch, {b.start, t.addr}});
  }
  for (Address a = b.start; a < b.end;) {
    auto insn = decode(image, a);
    bool is_term = b.terminator && b.terminator->addr == a &&
                   !is_synthetic_halt(*b.terminator, image);
    if (is_control_flow(insn.kind) && !is_term) {
      out.push_back({K::InteriorControlFlow, {b.start, a}});
      break;
    }
    a = insn.end();
  }
}

}  // namespace

std::vector<Violation> validate(const Cfg& g, const Image* image) {
  using K = Violation::Kind;
  std::vector<Violation> out;

  std::map<Address, int> end_count;
  const Block* prev = nullptr;
  std::optional<Address> last_dup;
  for (const auto& [start, b] : g.blocks()) {
    if (b.start >= b.end) out.push_back({K::EmptyBlock, {b.start}});
    if (prev && prev->start == b.start) {
      if (!last_dup || *last_dup != b.start)
        out.push_back({K::DuplicateBlockStart, {b.start}});
      last_dup = b.start;
    } else if (prev && prev->end > b.start) {
      out.push_back({K::OverlappingBlocks, {prev->start, b.start}});
    }
    ++end_count[b.end];
    if (g.candidates().contains(b.start))
      out.push_back({K::CandidateIsBlock, {b.start}});
    if (image) check_against_image(b, *image, out);
    prev = &b;
  }
  for (auto [end, n] : end_count)
    if (n > 1) out.push_back({K::DuplicateBlockEnd, {end}});

  for (const auto& e : g.edges()) {
    const Block* src = g.block_at(e.source);
    if (!src) {
      out.push_back({K::DanglingEdgeSource, {e.source, e.target}});
      continue;
    }
    if (!g.is_node(e.target))
      out.push_back({K::DanglingEdgeTarget, {e.source, e.target}});
    if (e.kind == EdgeKind::CallFallthrough && e.target != src->end)
      out.push_back({K::CallFallthroughTarget, {e.source, e.target}});
    if (!kind_matches(e.kind, src->terminator))
      out.push_back({K::EdgeKindMismatch, {e.source, e.target}});
  }

  for (const auto& [addr, f] : g.entries())
    if (!g.is_node(addr)) out.push_back({K::EntryNotNode, {addr}});
  return out;
}

std::vector<std::pair<Address, Address>> merge_ranges(
    std::vector<std::pair<Address, Address>> ranges) {
  std::sort(ranges.begin(), ranges.end());
  std::vector<std::pair<Address, Address>> out;
  for (auto [lo, hi] : ranges) {
    if (lo >= hi) continue;
    if (!out.empty() && lo <= out.back().second)
      out.back().second = std::max(out.back().second, hi);
    else
      out.emplace_back(lo, hi);
  }
  return out;
}

namespace {

std::vector<std::pair<Address, Address>> coverage(const Cfg& g) {
  std::vector<std::pair<Address, Address>> r;
  r.reserve(g.blocks().size());
  for (const auto& [s, b] : g.blocks()) r.emplace_back(b.start, b.end);
  return merge_ranges(std::move(r));
}

bool covered(const std::vector<std::pair<Address, Address>>& outer,
             std::pair<Address, Address> r) {
  auto it = std::upper_bound(
      outer.begin(), outer.end(), r.first,
      [](Address a, const auto& iv) { return a < iv.first; });
  if (it == outer.begin()) return false;
  --it;
  return it->first <= r.first && r.second <= it->second;
}

bool has_any_edge(const Cfg& g, Address src, Address dst) {
  auto it = g.edges().lower_bound(Edge{src, dst, EdgeKind::Direct});
  return it != g.edges().end() && it->source == src && it->target == dst;
}

}  // namespace

bool partial_order_le(const Cfg& g1, const Cfg& g2, const Image& image) {
  for (const Cfg* g : {&g1, &g2}) {
    auto v = validate(*g, &image);
    if (!v.empty())
      throw InvalidGraph("partial_order_le on invalid graph: " +
                         v.front().describe());
  }

  auto a2 = coverage(g2);
  for (auto r : coverage(g1))
    if (!covered(a2, r)) return false;

  for (const auto& e : g1.edges()) {
    const Block* src1 = g1.block_at(e.source);
    const Block* src2 = g2.block_ending_at(src1->end);
    if (!src2 || !has_any_edge(g2, src2->start, e.target)) return false;
  }

  for (const auto& [s, b] : g1.blocks()) {
    Address x = b.start;
    while (true) {
      const Block* part = g2.block_at(x);
      if (!part || part->end > b.end) return false;
      if (part->end == b.end) break;
      if (!has_any_edge(g2, x, part->end)) return false;
      x = part->end;
    }
  }

  for (const auto& [addr, f] : g1.entries())
    if (!g2.has_entry(addr)) return false;
  return true;
}

std::string canonical_serialize(const Cfg& g) {
  auto v = validate(g);
  if (!v.empty())
    throw InvalidGraph("cannot serialize invalid graph: " +
                       v.front().describe());
  std::ostringstream os;
  os << "pcfg-canonical 1\n"
     << "blocks " << g.blocks().size() << '\n'
     << "candidates " << g.candidates().size() << '\n'
     << "edges " << g.edges().size() << '\n'
     << "entries " << g.entries().size() << '\n';
  // Starts are unique in a valid graph, so map order is (start, end) order.
  for (const auto& [s, b] : g.blocks())
    os << "B " << hex(b.start) << ' ' << hex(b.end) << '\n';
  for (Address c : g.candidates()) os << "C " << hex(c) << '\n';
  for (const auto& e : g.edges())
    os << "E " << hex(e.source) << ' ' << hex(e.target) << ' '
       << to_string(e.kind) << '\n';
  for (const auto& [a, f] : g.entries())
    os << "F " << hex(a) << ' ' << to_string(f.status) << ' '
       << (f.seed ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace pcfg
