#include "pcfg/serial_ops.hpp"

#include <algorithm>
#include <deque>
#include <unordered_set>

#include "pcfg/finalization.hpp"

namespace pcfg {

BerCase apply_ber(Cfg& g, const Image& image, Address t) {
  if (!g.candidates().contains(t)) throw NotACandidate(t);

  if (const Block* b = g.block_containing(t); b && b->start < t) {
    Block orig = *b;
    g.remove_candidate(t);
    for (const auto& e : g.out_edges(orig.start)) {
      g.remove_edge(e);
      g.add_edge({t, e.target, e.kind});
    }
    g.set_block_end(orig.start, t);
    g.set_terminator(orig.start, std::nullopt);
    g.add_block({t, orig.end, orig.terminator});
    g.add_edge({orig.start, t, EdgeKind::Fallthrough});
    return BerCase::Split;
  }

  if (const Block* next = g.next_block_after(t);
      next && !contains_cfi(image, t, next->start)) {
    Address s = next->start;
    g.remove_candidate(t);
    g.add_block({t, s, std::nullopt});
    g.add_edge({t, s, EdgeKind::Fallthrough});
    return BerCase::EarlyEnd;
  }

  if (!image.in_text(t)) throw OutOfRange(t);
  g.remove_candidate(t);
  for (Address a = t;;) {
    if (a >= image.text_end()) {
      auto halt = Instruction::make(InstrKind::Halt, image.text_end());
      halt.length = 0;
      g.add_block({t, image.text_end(), halt});
      break;
    }
    auto insn = decode(image, a);
    if (is_control_flow(insn.kind)) {
      g.add_block({t, insn.end(), insn});
      break;
    }
    a = insn.end();
  }
  return BerCase::Linear;
}

namespace {

bool link(Cfg& g, const Image& image, Address src, Address dst, EdgeKind k,
          std::vector<Edge>* added) {
  if (!image.in_text(dst)) return false;
  if (!g.block_at(dst)) g.add_candidate(dst);
  Edge e{src, dst, k};
  if (!g.add_edge(e)) return false;
  if (added) added->push_back(e);
  return true;
}

}  // namespace

std::vector<Edge> apply_dec(Cfg& g, const Image& image, Address start) {
  const Block* b = g.block_at(start);
  if (!b || !b->terminator) throw NotDirectTerminator(start);
  auto t = *b->terminator;
  Address end = b->end;
  std::vector<Edge> added;
  switch (t.kind) {
    case InstrKind::JmpDirect:
      link(g, image, start, t.target, EdgeKind::Direct, &added);
      break;
    case InstrKind::JccDirect:
      link(g, image, start, t.target, EdgeKind::CondTaken, &added);
      link(g, image, start, end, EdgeKind::CondFallthrough, &added);
      break;
    case InstrKind::Call:
      link(g, image, start, t.target, EdgeKind::Call, &added);
      break;
    default:
      throw NotDirectTerminator(start);
  }
  return added;
}

bool apply_cfec(Cfg& g, const Image& image, const Edge& call_edge,
                ReturnStatus callee_status) {
  if (call_edge.kind != EdgeKind::Call || !g.has_edge(call_edge))
    throw EdgeNotFound("not a call edge: " + hex(call_edge.source) + " -> " +
                       hex(call_edge.target));
  if (callee_status == ReturnStatus::Unset)
    throw CalleeUnset(call_edge.target);
  if (callee_status == ReturnStatus::NoReturn) return false;
  const Block* b = g.block_at(call_edge.source);
  return link(g, image, b->start, b->end, EdgeKind::CallFallthrough, nullptr);
}

std::vector<Edge> apply_iec(Cfg& g, const Image& image, Address start,
                            TableRegistry* registry) {
  const Block* b = g.block_at(start);
  if (!b || !b->terminator) throw NotIndirectTerminator(start);
  if (b->terminator->kind == InstrKind::IJmpOpaque) return {};
  auto r = analyze_ijmp(g, image, start);
  if (registry)
    registry->record(b->terminator->table_base, b->terminator->imm,
                     r.effective_bound, b->end, r.clamped);
  std::vector<Edge> added;
  for (Address t : r.targets)
    link(g, image, start, t, EdgeKind::IndirectResolved, &added);
  return added;
}

namespace {

bool intra(EdgeKind k) { return is_intraprocedural(k); }

// h2: some function that reaches the branch source also reaches its target
// without using the branch itself.
bool reachable_within_function(const Cfg& g, const Edge& e) {
  std::vector<Address> owners;
  std::unordered_set<Address> seen{e.source};
  std::vector<Address> stack{e.source};
  while (!stack.empty()) {
    Address a = stack.back();
    stack.pop_back();
    if (g.has_entry(a)) owners.push_back(a);
    for (const auto& in : g.in_edges(a))
      if (intra(in.kind) && in != e && seen.insert(in.source).second)
        stack.push_back(in.source);
  }
  seen.clear();
  for (Address o : owners)
    if (seen.insert(o).second) stack.push_back(o);
  while (!stack.empty()) {
    Address a = stack.back();
    stack.pop_back();
    if (a == e.target) return true;
    for (const auto& out : g.out_edges(a))
      if (intra(out.kind) && out != e && seen.insert(out.target).second)
        stack.push_back(out.target);
  }
  return false;
}

void relabel(Cfg& g, const Edge& e, EdgeKind k) {
  g.remove_edge(e);
  g.add_edge({e.source, e.target, k});
}

}  // namespace

void apply_fei(Cfg& g, const Image& image, const Edge& e) {
  if (!g.has_edge(e))
    throw EdgeNotFound("no edge " + hex(e.source) + " -> " + hex(e.target));
  if (e.kind == EdgeKind::Call) {
    if (!g.has_entry(e.target))
      g.add_entry({e.target, entry_name(image, e.target), ReturnStatus::Unset,
                   false});
    return;
  }
  if (e.kind != EdgeKind::Direct) return;
  if (g.has_entry(e.target)) {
    relabel(g, e, EdgeKind::TailCall);
    return;
  }
  if (reachable_within_function(g, e)) return;
  const Block* src = g.block_at(e.source);
  if (src && src->terminator &&
      contains_teardown(image, src->start, src->terminator->addr)) {
    relabel(g, e, EdgeKind::TailCall);
    g.add_entry(
        {e.target, entry_name(image, e.target), ReturnStatus::Unset, false});
  }
}

std::size_t prune_unreachable(Cfg& g) {
  std::unordered_set<Address> seen;
  std::vector<Address> stack;
  for (const auto& [a, f] : g.entries())
    if (seen.insert(a).second) stack.push_back(a);
  while (!stack.empty()) {
    Address a = stack.back();
    stack.pop_back();
    for (const auto& e : g.out_edges(a))
      if (seen.insert(e.target).second) stack.push_back(e.target);
  }
  std::vector<Address> dead_blocks, dead_cands;
  for (const auto& [s, b] : g.blocks())
    if (!seen.contains(s)) dead_blocks.push_back(s);
  for (Address c : g.candidates())
    if (!seen.contains(c)) dead_cands.push_back(c);
  for (Address s : dead_blocks) {
    for (const auto& e : g.out_edges(s)) g.remove_edge(e);
    g.remove_block(s);
  }
  for (Address c : dead_cands) g.remove_candidate(c);
  return dead_blocks.size();
}

void apply_er_batch(Cfg& g, std::span<const Edge> es) {
  for (const auto& e : es)
    if (!g.has_edge(e))
      throw EdgeNotFound("no edge " + hex(e.source) + " -> " + hex(e.target));
  for (const auto& e : es) g.remove_edge(e);
  prune_unreachable(g);
}

void apply_er(Cfg& g, const Edge& e) { apply_er_batch(g, {&e, 1}); }

Cfg op_ber(Cfg g, const Image& image, Address t) {
  apply_ber(g, image, t);
  return g;
}
Cfg op_dec(Cfg g, const Image& image, Address start) {
  apply_dec(g, image, start);
  return g;
}
Cfg op_cfec(Cfg g, const Image& image, const Edge& call_edge,
            ReturnStatus callee_status) {
  apply_cfec(g, image, call_edge, callee_status);
  return g;
}
Cfg op_iec(Cfg g, const Image& image, Address start) {
  apply_iec(g, image, start);
  return g;
}
Cfg op_fei(Cfg g, const Image& image, const Edge& e) {
  apply_fei(g, image, e);
  return g;
}
Cfg op_er(Cfg g, const Edge& e) {
  apply_er(g, e);
  return g;
}

std::optional<std::string> entry_name(const Image& image, Address a) {
  std::optional<std::string> best;
  for (const auto& s : image.symbols())
    if (s.kind == SymbolKind::Func && s.offset == a &&
        (!best || s.mangled < *best))
      best = s.mangled;
  return best;
}

std::vector<Address> seed_order(const Image& image) {
  std::vector<Address> out;
  std::unordered_set<Address> seen;
  for (const auto& s : image.symbols())
    if (s.kind == SymbolKind::Func && seen.insert(s.offset).second)
      out.push_back(s.offset);
  return out;
}

Cfg initial_graph(const Image& image) {
  Cfg g;
  std::map<Address, FunctionEntry> seeds;
  for (const auto& s : image.symbols()) {
    if (s.kind != SymbolKind::Func) continue;
    auto& f = seeds[s.offset];
    f.entry = s.offset;
    f.seed = true;
    if (!f.name || s.mangled < *f.name) f.name = s.mangled;
    if (s.known_noreturn) f.status = ReturnStatus::NoReturn;
  }
  for (auto& [a, f] : seeds) {
    g.add_candidate(a);
    g.add_entry(std::move(f));
  }
  return g;
}

std::vector<Address> entries_reaching_return(const Cfg& g) {
  std::unordered_set<Address> seen;
  std::vector<Address> stack;
  for (const auto& [s, b] : g.blocks())
    if (b.terminator && b.terminator->kind == InstrKind::Ret) {
      seen.insert(s);
      stack.push_back(s);
    }
  while (!stack.empty()) {
    Address a = stack.back();
    stack.pop_back();
    for (const auto& e : g.in_edges(a))
      if (e.kind != EdgeKind::Call && seen.insert(e.source).second)
        stack.push_back(e.source);
  }
  std::vector<Address> out;
  for (const auto& [a, f] : g.entries())
    if (seen.contains(a)) out.push_back(a);
  return out;
}

void identify_tail_calls(Cfg& g, const Image& image) {
  std::vector<Edge> direct;
  for (const auto& e : g.edges())
    if (e.kind == EdgeKind::Direct) direct.push_back(e);
  for (const auto& e : direct)
    if (g.has_edge(e)) apply_fei(g, image, e);

  std::vector<Address> unset;
  for (const auto& [a, f] : g.entries())
    if (f.status == ReturnStatus::Unset) unset.push_back(a);
  if (unset.empty()) return;
  auto ret = entries_reaching_return(g);
  std::unordered_set<Address> returning(ret.begin(), ret.end());
  for (Address a : unset)
    g.entry(a)->status = returning.contains(a) ? ReturnStatus::Return
                                               : ReturnStatus::NoReturn;
}

namespace {

// Single-threaded traversal driver: a FIFO of functions, each draining its
// own FIFO of block targets.
class SerialBuilder {
 public:
  SerialBuilder(const Image& image, SerialOptions opts)
      : image_(image), opts_(opts), g_(initial_graph(image)) {}

  ConstructResult run() {
    auto seeds = seed_order(image_);
    if (opts_.reverse_seed_order) std::reverse(seeds.begin(), seeds.end());
    for (Address s : seeds) push_work(s, s);

    while (true) {
      while (!queue_.empty()) {
        Address f = queue_.front();
        queue_.pop_front();
        fns_[f].queued = false;
        drain(f);
      }
      if (refresh_all_tables()) continue;
      if (resolve_returns()) continue;
      if (resolve_cycles()) continue;
      break;
    }

    identify_tail_calls(g_, image_);
    if (opts_.finalize) g_ = finalize(std::move(g_), image_, tables_);
    return {std::move(g_), std::move(tables_)};
  }

 private:
  struct Fn {
    std::deque<Address> work;
    std::vector<Address> ijmp_ends;
    bool queued = false;
  };
  struct Waiter {
    Address caller;
    Address call_end;
  };

  void push_work(Address f, Address a) {
    auto& fn = fns_[f];
    fn.work.push_back(a);
    if (!fn.queued) {
      fn.queued = true;
      queue_.push_back(f);
    }
  }

  void drain(Address f) {
    while (true) {
      while (!fns_[f].work.empty()) {
        Address t = fns_[f].work.front();
        fns_[f].work.pop_front();
        visit(f, t);
      }
      if (!refresh_tables(f)) break;
    }
  }

  void visit(Address f, Address t) {
    if (g_.block_at(t) || !image_.in_text(t)) return;
    g_.add_candidate(t);
    if (apply_ber(g_, image_, t) != BerCase::Linear) return;
    const Block& b = *g_.block_at(t);
    switch (b.terminator->kind) {
      case InstrKind::JmpDirect:
      case InstrKind::JccDirect:
        for (const auto& e : apply_dec(g_, image_, t)) push_work(f, e.target);
        break;
      case InstrKind::Call:
        process_call(f, t);
        break;
      case InstrKind::Ret:
        if (g_.entry(f)->status == ReturnStatus::Unset)
          set_status(f, ReturnStatus::Return);
        break;
      case InstrKind::IJmpTable: {
        fns_[f].ijmp_ends.push_back(b.end);
        ijmp_owner_[b.end] = f;
        for (const auto& e : apply_iec(g_, image_, t, &tables_))
          push_work(f, e.target);
        break;
      }
      default:
        break;
    }
  }

  void process_call(Address f, Address start) {
    auto added = apply_dec(g_, image_, start);
    if (added.empty()) return;
    const Edge call = added.front();
    bool fresh = !g_.has_entry(call.target);
    apply_fei(g_, image_, call);
    if (fresh) push_work(call.target, call.target);
    auto status = g_.entry(call.target)->status;
    if (status == ReturnStatus::Unset) {
      waiters_[call.target].push_back({f, g_.block_at(start)->end});
    } else if (apply_cfec(g_, image_, call, status)) {
      push_work(f, g_.block_at(start)->end);
    }
  }

  void set_status(Address f, ReturnStatus s) {
    g_.entry(f)->status = s;
    auto it = waiters_.find(f);
    if (it == waiters_.end()) return;
    auto ws = std::move(it->second);
    waiters_.erase(it);
    if (s != ReturnStatus::Return) return;
    for (const auto& w : ws) {
      const Block* b = g_.block_ending_at(w.call_end);
      if (apply_cfec(g_, image_, {b->start, f, EdgeKind::Call}, s))
        push_work(w.caller, w.call_end);
    }
  }

  bool refresh_tables(Address f) {
    bool any = false;
    for (Address end : fns_[f].ijmp_ends) any |= refresh_table(f, end);
    return any;
  }

  bool refresh_table(Address owner, Address end) {
    const Block* b = g_.block_ending_at(end);
    bool any = false;
    for (const auto& e : apply_iec(g_, image_, b->start, &tables_)) {
      push_work(owner, e.target);
      any = true;
    }
    return any;
  }

  bool refresh_all_tables() {
    bool any = false;
    for (auto [end, owner] : ijmp_owner_) any |= refresh_table(owner, end);
    return any;
  }

  bool resolve_returns() {
    bool any = false;
    for (Address a : entries_reaching_return(g_))
      if (g_.entry(a)->status == ReturnStatus::Unset) {
        set_status(a, ReturnStatus::Return);
        any = true;
      }
    return any;
  }

  bool resolve_cycles() {
    bool any = false;
    std::vector<Address> unset;
    for (const auto& [a, f] : g_.entries())
      if (f.status == ReturnStatus::Unset) unset.push_back(a);
    for (Address a : unset) {
      set_status(a, ReturnStatus::NoReturn);
      any = true;
    }
    return any;
  }

  const Image& image_;
  SerialOptions opts_;
  Cfg g_;
  TableRegistry tables_;
  std::map<Address, Fn> fns_;
  std::deque<Address> queue_;
  std::map<Address, std::vector<Waiter>> waiters_;
  std::map<Address, Address> ijmp_owner_;
};

}  // namespace

ConstructResult serial_construct_full(const Image& image, SerialOptions opts) {
  return SerialBuilder(image, opts).run();
}

Cfg serial_construct(const Image& image, SerialOptions opts) {
  return serial_construct_full(image, opts).graph;
}

}  // namespace pcfg
