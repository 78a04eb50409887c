#include "pcfg/parallel.hpp"

#include <algorithm>
#include <chrono>

#include <tbb/global_control.h>
#include <tbb/parallel_for.h>
#include <tbb/task_arena.h>
#include <tbb/task_group.h>

#include "pcfg/serial_ops.hpp"
#include "pcfg/symtab.hpp"

namespace pcfg {

struct FnState {
  struct Waiter {
    FnState* caller;
    Address call_end;
  };

  Address entry = 0;
  bool seed = false;
  std::optional<std::string> name;

  std::mutex mu;  // guards everything below
  ReturnStatus status = ReturnStatus::Unset;
  std::vector<Waiter> waiters;
  std::deque<Address> work;
  bool scheduled = false;

  // Touched only by the task currently running this function.
  std::vector<Address> ijmp_ends;
};

struct ConcurrentCfgState::Counters {
  using C = std::atomic<std::uint64_t>;
  C blocks_created{0}, start_attempts{0}, ends_registered{0}, end_losses{0};
  C functions_created{0}, function_attempts{0};
  C splits{0}, split_chains{0}, split_max_depth{0}, split_nonmonotone{0};
  C cfis_decoded{0}, targets_processed{0}, cache_hits{0};
  C waiters_registered{0}, waiters_drained{0}, waiter_peak{0};
  C waiters_at_first_quiescence{0}, already_set{0}, table_growths{0};
  C quiescence_rounds{0};

  static void raise(C& c, std::uint64_t v) {
    auto cur = c.load(std::memory_order_relaxed);
    while (cur < v && !c.compare_exchange_weak(cur, v)) {
    }
  }
};

namespace {

constexpr auto kRelaxed = std::memory_order_relaxed;

bool is_direct_pred(EdgeKind k) {
  return k == EdgeKind::Direct || k == EdgeKind::CondTaken ||
         k == EdgeKind::CondFallthrough || k == EdgeKind::CallFallthrough;
}

}  // namespace

ConcurrentCfgState::ConcurrentCfgState(const Image& image)
    : image_(image), c_(std::make_unique<Counters>()) {}

ConcurrentCfgState::~ConcurrentCfgState() = default;

bool ConcurrentCfgState::attempt_create_block(Address start) {
  c_->start_attempts.fetch_add(1, kRelaxed);
  decltype(starts_)::accessor acc;
  if (!starts_.insert(acc, start)) return false;
  c_->blocks_created.fetch_add(1, kRelaxed);
  return true;
}

PBlock* ConcurrentCfgState::new_block(Address start, Address end,
                                      std::optional<Instruction> t) {
  auto it = block_store_.push_back(std::make_unique<PBlock>(start, end, t));
  return it->get();
}

void ConcurrentCfgState::add_incoming(Address target, Address src_end,
                                      EdgeKind k) {
  decltype(incoming_)::accessor acc;
  incoming_.insert(acc, target);
  acc->second.emplace_back(src_end, k);
}

std::vector<OutEdge> ConcurrentCfgState::create_edges(const PBlock& b,
                                                      Address end) {
  std::vector<OutEdge> out;
  auto add = [&](Address t, EdgeKind k) {
    if (image_.in_text(t)) out.push_back({t, k});
  };
  if (!b.terminator) {
    add(end, EdgeKind::Fallthrough);
  } else {
    const auto& t = *b.terminator;
    switch (t.kind) {
      case InstrKind::JmpDirect:
        add(t.target, EdgeKind::Direct);
        break;
      case InstrKind::JccDirect:
        add(t.target, EdgeKind::CondTaken);
        add(end, EdgeKind::CondFallthrough);
        break;
      case InstrKind::Call:
        add(t.target, EdgeKind::Call);
        break;
      default:
        break;
    }
  }
  for (const auto& e : out) add_incoming(e.target, end, e.kind);
  return out;
}

ConcurrentCfgState::Registration ConcurrentCfgState::register_block_end(
    PBlock* b) {
  Registration r;
  r.end = b->end.load();
  {
    EndMap::accessor acc;
    if (ends_.insert(acc, r.end)) {
      acc->second.block = b;
      acc->second.out = create_edges(*b, r.end);
      c_->ends_registered.fetch_add(1, kRelaxed);
      r.winner = true;
      r.edges = acc->second.out;
      return r;
    }
  }
  c_->end_losses.fetch_add(1, kRelaxed);
  split_chain(b, r.end);
  return r;
}

std::vector<Address> ConcurrentCfgState::split_chain(PBlock* b, Address end) {
  std::vector<Address> visited{end};
  c_->split_chains.fetch_add(1, kRelaxed);
  PBlock* cur = b;
  Address at = end;
  while (true) {
    Address next;
    {
      EndMap::accessor acc;
      if (ends_.insert(acc, at)) {
        cur->end.store(at);
        acc->second.block = cur;
        acc->second.out = create_edges(*cur, at);
        c_->ends_registered.fetch_add(1, kRelaxed);
        break;
      }
      PBlock* reg = acc->second.block;
      if (reg == cur || reg->start == cur->start) break;
      c_->splits.fetch_add(1, kRelaxed);
      if (reg->start > cur->start) {
        // cur covers reg: keep reg here, cut cur back to reg's start.
        cur->end.store(reg->start);
        cur->terminator.reset();
        next = reg->start;
      } else {
        // reg covers cur: cur takes over this end and its edges, reg is cut
        // back to cur's start.
        reg->end.store(cur->start);
        reg->terminator.reset();
        acc->second.block = cur;
        next = cur->start;
        cur = reg;
      }
    }
    if (next >= at) c_->split_nonmonotone.fetch_add(1, kRelaxed);
    at = next;
    visited.push_back(at);
  }
  Counters::raise(c_->split_max_depth, visited.size() - 1);
  return visited;
}

FnState* ConcurrentCfgState::function(Address entry) const {
  decltype(functions_)::const_accessor acc;
  return functions_.find(acc, entry) ? acc->second : nullptr;
}

std::vector<FnState*> ConcurrentCfgState::functions_sorted() const {
  std::vector<FnState*> out;
  for (const auto& [a, f] : functions_) out.push_back(f);
  std::sort(out.begin(), out.end(),
            [](auto* x, auto* y) { return x->entry < y->entry; });
  return out;
}

bool ConcurrentCfgState::attempt_create_function(
    Address entry, bool seed, std::optional<std::string> name,
    ReturnStatus status) {
  c_->function_attempts.fetch_add(1, kRelaxed);
  {
    decltype(functions_)::accessor acc;
    if (!functions_.insert(acc, entry)) return false;
    auto fn = std::make_unique<FnState>();
    fn->entry = entry;
    fn->seed = seed;
    fn->name = std::move(name);
    fn->status = status;
    acc->second = fn_store_.push_back(std::move(fn))->get();
  }
  c_->functions_created.fetch_add(1, kRelaxed);
  push_work(entry, entry);
  return true;
}

ReturnStatus ConcurrentCfgState::status(Address entry) const {
  FnState* fn = function(entry);
  if (!fn) return ReturnStatus::Unset;
  std::lock_guard lk(fn->mu);
  return fn->status;
}

void ConcurrentCfgState::set_status_locked(FnState* fn, ReturnStatus s,
                                           std::unique_lock<std::mutex>& lk) {
  fn->status = s;
  auto waiters = std::move(fn->waiters);
  fn->waiters.clear();
  lk.unlock();
  c_->waiters_drained.fetch_add(waiters.size(), kRelaxed);
  if (s != ReturnStatus::Return) return;
  for (const auto& w : waiters)
    if (append_edge(w.call_end, {w.call_end, EdgeKind::CallFallthrough}))
      push_work(w.caller->entry, w.call_end);
}

void ConcurrentCfgState::update_return_status(Address entry, ReturnStatus s) {
  FnState* fn = function(entry);
  if (!fn) throw InvalidGraph("no function at " + hex(entry));
  std::unique_lock lk(fn->mu);
  if (fn->status != ReturnStatus::Unset) {
    c_->already_set.fetch_add(1, kRelaxed);
    throw AlreadySet(entry);
  }
  set_status_locked(fn, s, lk);
}

bool ConcurrentCfgState::try_set_return(FnState* fn) {
  std::unique_lock lk(fn->mu);
  if (fn->status != ReturnStatus::Unset) return false;
  set_status_locked(fn, ReturnStatus::Return, lk);
  return true;
}

bool ConcurrentCfgState::await_callee(Address caller, Address call_end,
                                      Address callee) {
  FnState* ce = function(callee);
  FnState* cr = function(caller);
  std::unique_lock lk(ce->mu);
  if (ce->status == ReturnStatus::Unset) {
    ce->waiters.push_back({cr, call_end});
    lk.unlock();
    auto reg = c_->waiters_registered.fetch_add(1) + 1;
    auto drained = c_->waiters_drained.load();
    Counters::raise(c_->waiter_peak, reg > drained ? reg - drained : 0);
    return true;
  }
  auto s = ce->status;
  lk.unlock();
  if (s == ReturnStatus::Return &&
      append_edge(call_end, {call_end, EdgeKind::CallFallthrough}))
    push_work(caller, call_end);
  return false;
}

std::size_t ConcurrentCfgState::pending_waiters() const {
  std::size_t n = 0;
  for (const auto& [a, f] : functions_) {
    std::lock_guard lk(f->mu);
    n += f->waiters.size();
  }
  return n;
}

void ConcurrentCfgState::push_work(Address fn_entry, Address target) {
  FnState* fn = function(fn_entry);
  {
    std::lock_guard lk(fn->mu);
    fn->work.push_back(target);
    if (fn->scheduled) return;
    fn->scheduled = true;
  }
  if (schedule) schedule(fn);
}

bool ConcurrentCfgState::append_edge(Address end, OutEdge e) {
  {
    EndMap::accessor acc;
    if (!ends_.find(acc, end))
      throw InvalidGraph("edge from unregistered end " + hex(end));
    auto& out = acc->second.out;
    if (std::find(out.begin(), out.end(), e) != out.end()) return false;
    out.push_back(e);
  }
  add_incoming(e.target, end, e.kind);
  return true;
}

std::optional<Address> ConcurrentCfgState::start_of_block_ending(
    Address end) const {
  EndMap::const_accessor acc;
  if (!ends_.find(acc, end)) return std::nullopt;
  return acc->second.block->start;
}

Address ConcurrentCfgState::live_chain_start(Address start) const {
  Address cur = start;
  while (true) {
    bool has_ft = false;
    {
      decltype(incoming_)::const_accessor acc;
      if (incoming_.find(acc, cur))
        for (const auto& [src, k] : acc->second)
          if (k == EdgeKind::Fallthrough) has_ft = true;
    }
    if (!has_ft) break;
    auto prev = start_of_block_ending(cur);
    if (!prev || *prev >= cur) break;
    cur = *prev;
  }
  return cur;
}

std::vector<std::uint16_t> ConcurrentCfgState::live_predecessor_hints(
    Address start) const {
  std::vector<std::uint16_t> hints;
  Address cur = start;
  while (true) {
    std::vector<std::pair<Address, EdgeKind>> in;
    {
      decltype(incoming_)::const_accessor acc;
      if (incoming_.find(acc, cur)) in = acc->second;
    }
    bool has_ft = false;
    for (const auto& [src_end, k] : in) {
      if (k == EdgeKind::Fallthrough) has_ft = true;
      if (!is_direct_pred(k)) continue;
      auto s = start_of_block_ending(src_end);
      if (!s) continue;
      if (auto h = last_bound_hint(image_, live_chain_start(*s), src_end))
        hints.push_back(*h);
    }
    if (!has_ft) break;
    auto prev = start_of_block_ending(cur);
    if (!prev || *prev >= cur) break;
    cur = *prev;
  }
  return hints;
}

bool ConcurrentCfgState::refresh_table(FnState* owner, Address end) {
  Address start;
  Instruction term;
  {
    EndMap::const_accessor acc;
    if (!ends_.find(acc, end)) return false;
    start = acc->second.block->start;
    term = *acc->second.block->terminator;
  }
  auto hints = live_predecessor_hints(start);
  auto r = resolve_table(image_, term.table_base, term.imm, hints);
  if (tables_.record(term.table_base, term.imm, r.effective_bound, end,
                     r.clamped))
    c_->table_growths.fetch_add(1, kRelaxed);
  // Never analyze below what an earlier (possibly larger) view found.
  auto bound = std::max(r.effective_bound,
                        tables_.find(term.table_base)->effective_bound);
  auto targets = read_table(image_, term.table_base, 0, bound);
  bool added = false;
  for (Address t : targets)
    if (append_edge(end, {t, EdgeKind::IndirectResolved})) {
      push_work(owner->entry, t);
      added = true;
    }
  return added;
}

void ConcurrentCfgState::process_call(FnState* fn, Address call_end,
                                      Address target) {
  attempt_create_function(target);
  await_callee(fn->entry, call_end, target);
}

void ConcurrentCfgState::visit(FnState* fn, Address t) {
  c_->targets_processed.fetch_add(1, kRelaxed);
  if (!image_.in_text(t)) return;
  if (!tl_cache_.local().insert(t).second) {
    c_->cache_hits.fetch_add(1, kRelaxed);
    return;
  }
  if (!attempt_create_block(t)) return;

  // Linear parsing: no shared lookups until the control-flow instruction.
  std::optional<Instruction> term;
  Address end = t;
  for (Address a = t;;) {
    if (a >= image_.text_end()) {
      term = Instruction::make(InstrKind::Halt, image_.text_end());
      term->length = 0;
      end = image_.text_end();
      break;
    }
    auto insn = decode(image_, a);
    if (is_control_flow(insn.kind)) {
      term = insn;
      end = insn.end();
      break;
    }
    a = insn.end();
  }
  c_->cfis_decoded.fetch_add(1, kRelaxed);

  auto reg = register_block_end(new_block(t, end, term));
  if (term->kind == InstrKind::Ret) try_set_return(fn);
  if (!reg.winner) return;

  switch (term->kind) {
    case InstrKind::JmpDirect:
    case InstrKind::JccDirect:
      for (const auto& e : reg.edges) push_work(fn->entry, e.target);
      break;
    case InstrKind::Call:
      if (!reg.edges.empty()) process_call(fn, end, term->target);
      break;
    case InstrKind::IJmpTable: {
      {
        std::lock_guard lk(ijmp_owner_mu_);
        ijmp_owner_[end] = fn;
      }
      fn->ijmp_ends.push_back(end);
      refresh_table(fn, end);
      break;
    }
    default:
      break;
  }
}

void ConcurrentCfgState::run_function(FnState* fn) {
  while (true) {
    Address t;
    {
      std::unique_lock lk(fn->mu);
      if (fn->work.empty()) {
        lk.unlock();
        for (std::size_t i = 0; i < fn->ijmp_ends.size(); ++i)
          refresh_table(fn, fn->ijmp_ends[i]);
        lk.lock();
        if (fn->work.empty()) {
          fn->scheduled = false;
          return;
        }
        continue;
      }
      t = fn->work.front();
      fn->work.pop_front();
    }
    visit(fn, t);
  }
}

bool ConcurrentCfgState::refresh_all_tables(const Cfg& snapshot) {
  c_->quiescence_rounds.fetch_add(1, kRelaxed);
  bool any = false;
  for (auto [end, owner] : ijmp_owner_) {
    const Block* b = snapshot.block_ending_at(end);
    auto r = analyze_ijmp(snapshot, image_, b->start);
    const auto& t = *b->terminator;
    if (tables_.record(t.table_base, t.imm, r.effective_bound, end, r.clamped))
      c_->table_growths.fetch_add(1, kRelaxed);
    for (Address target : r.targets)
      if (append_edge(end, {target, EdgeKind::IndirectResolved})) {
        push_work(owner->entry, target);
        any = true;
      }
  }
  return any;
}

bool ConcurrentCfgState::resolve_returns(const Cfg& snapshot) {
  bool any = false;
  for (Address a : entries_reaching_return(snapshot))
    if (status(a) == ReturnStatus::Unset) {
      update_return_status(a, ReturnStatus::Return);
      any = true;
    }
  return any;
}

bool ConcurrentCfgState::resolve_cycles() {
  bool any = false;
  for (FnState* f : functions_sorted())
    if (status(f->entry) == ReturnStatus::Unset) {
      update_return_status(f->entry, ReturnStatus::NoReturn);
      any = true;
    }
  return any;
}

void ConcurrentCfgState::note_first_quiescence() {
  c_->waiters_at_first_quiescence.store(pending_waiters());
}

Cfg ConcurrentCfgState::export_graph() const {
  Cfg g;
  for (const auto& [end, e] : ends_)
    g.add_block({e.block->start, end, e.block->terminator});
  for (const auto& [end, e] : ends_)
    for (const auto& o : e.out) g.add_edge({e.block->start, o.target, o.kind});
  for (const auto& [a, f] : functions_)
    g.add_entry({a, f->name, f->status, f->seed});
  return g;
}

EngineCounters ConcurrentCfgState::counters() const {
  const auto& c = *c_;
  EngineCounters r;
  r.blocks_created = c.blocks_created;
  r.start_attempts = c.start_attempts;
  r.ends_registered = c.ends_registered;
  r.end_losses = c.end_losses;
  r.functions_created = c.functions_created;
  r.function_attempts = c.function_attempts;
  r.splits = c.splits;
  r.split_chains = c.split_chains;
  r.split_max_depth = c.split_max_depth;
  r.split_nonmonotone = c.split_nonmonotone;
  r.cfis_decoded = c.cfis_decoded;
  r.targets_processed = c.targets_processed;
  r.cache_hits = c.cache_hits;
  r.waiters_registered = c.waiters_registered;
  r.waiters_drained = c.waiters_drained;
  r.waiter_peak = c.waiter_peak;
  r.waiters_at_first_quiescence = c.waiters_at_first_quiescence;
  r.already_set = c.already_set;
  r.table_growths = c.table_growths;
  r.quiescence_rounds = c.quiescence_rounds;
  return r;
}

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

EngineResult construct_full(const Image& image, EngineOptions opts) {
  unsigned workers = std::max(1u, opts.workers);
  tbb::global_control gc(tbb::global_control::max_allowed_parallelism,
                         workers);
  tbb::task_arena arena(static_cast<int>(workers));
  tbb::task_group tg;

  ConcurrentCfgState st(image);
  std::mutex pending_mu;
  std::vector<FnState*> pending;
  auto drain = [&] {
    if (!opts.level_synchronous) {
      tg.wait();
      return;
    }
    while (true) {
      std::vector<FnState*> round;
      {
        std::lock_guard lk(pending_mu);
        round.swap(pending);
      }
      if (round.empty()) break;
      std::sort(round.begin(), round.end(),
                [](auto* a, auto* b) { return a->entry < b->entry; });
      tbb::parallel_for(std::size_t{0}, round.size(),
                        [&](std::size_t i) { st.run_function(round[i]); });
    }
  };

  EngineResult res;
  arena.execute([&] {
    auto t0 = std::chrono::steady_clock::now();
    IndexedSymbols syms;
    const auto& all = image.symbols();
    tbb::parallel_for(std::size_t{0}, all.size(),
                      [&](std::size_t i) { syms.insert(all[i]); });
    syms.seal();
    auto seeds = seed_order(image);
    tbb::parallel_for(std::size_t{0}, seeds.size(), [&](std::size_t i) {
      std::optional<std::string> name;
      bool noreturn = false;
      for (const auto& s : syms.lookup_by_offset(seeds[i])) {
        if (s.kind != SymbolKind::Func) continue;
        if (!name) name = s.mangled;  // lookups are sorted by mangled name
        noreturn = noreturn || s.known_noreturn;
      }
      st.attempt_create_function(
          seeds[i], true, name,
          noreturn ? ReturnStatus::NoReturn : ReturnStatus::Unset);
    });
    // Every seed exists before any traversal can discover it as a callee.
    if (opts.level_synchronous) {
      st.schedule = [&](FnState* f) {
        std::lock_guard lk(pending_mu);
        pending.push_back(f);
      };
    } else {
      st.schedule = [&](FnState* f) {
        tg.run([&st, f] { st.run_function(f); });
      };
    }
    for (FnState* f : st.functions_sorted()) st.schedule(f);
    res.times.init_ms = ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    drain();
    st.note_first_quiescence();
    Cfg g;
    while (true) {
      g = st.export_graph();
      if (st.refresh_all_tables(g) || st.resolve_returns(g) ||
          st.resolve_cycles()) {
        drain();
        continue;
      }
      break;
    }
    identify_tail_calls(g, image);
    res.times.traversal_ms = ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    if (opts.finalize)
      g = finalize(std::move(g), image, st.tables(), &res.finalize_stats,
                   {.parallel = true});
    res.times.finalization_ms = ms_since(t0);
    res.graph = std::move(g);
  });
  res.counters = st.counters();
  res.tables = st.tables();
  return res;
}

Cfg construct(const Image& image, unsigned workers) {
  return construct_full(image, {.workers = workers}).graph;
}

}  // namespace pcfg
