#include "pcfg/finalization.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include <tbb/parallel_for.h>

#include "pcfg/serial_ops.hpp"

namespace pcfg {

bool FunctionBoundary::contains(Address a) const {
  return std::binary_search(blocks.begin(), blocks.end(), a);
}

std::size_t trim_overlapping_tables(Cfg& g, const Image& image,
                                    TableRegistry& registry) {
  auto tables = registry.sorted();
  std::vector<Edge> doomed;
  std::size_t trimmed = 0;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const auto& d = tables[i];
    const Block* owner = g.block_ending_at(d.owner_end);
    if (owner) registry.set_owner_block(d.base, owner->start);
    std::uint32_t bound = d.effective_bound;
    if (i + 1 < tables.size()) {
      Address next = tables[i + 1].base;
      if (d.base + 4ull * bound > next)
        bound = static_cast<std::uint32_t>((next - d.base) / 4);
    }
    registry.set_final_bound(d.base, bound);
    if (bound == d.effective_bound) continue;
    ++trimmed;
    if (!owner) continue;
    auto kept = read_table(image, d.base, 0, bound);
    std::unordered_set<Address> keep(kept.begin(), kept.end());
    auto cut = read_table(image, d.base, bound, d.effective_bound);
    std::sort(cut.begin(), cut.end());
    cut.erase(std::unique(cut.begin(), cut.end()), cut.end());
    for (Address t : cut) {
      Edge e{owner->start, t, EdgeKind::IndirectResolved};
      if (!keep.contains(t) && g.has_edge(e)) doomed.push_back(e);
    }
  }
  if (!doomed.empty()) apply_er_batch(g, doomed);
  return trimmed;
}

namespace {

FunctionBoundary boundary_of(const Cfg& g, Address entry) {
  FunctionBoundary fb{entry, {}};
  std::unordered_set<Address> seen{entry};
  std::vector<Address> stack{entry};
  while (!stack.empty()) {
    Address a = stack.back();
    stack.pop_back();
    if (g.block_at(a)) fb.blocks.push_back(a);
    for (const auto& e : g.out_edges(a))
      if (is_intraprocedural(e.kind) && seen.insert(e.target).second)
        stack.push_back(e.target);
  }
  std::sort(fb.blocks.begin(), fb.blocks.end());
  return fb;
}

bool has_incoming_call(const Cfg& g, Address t) {
  for (const auto& e : g.in_edges(t))
    if (e.kind == EdgeKind::Call) return true;
  return false;
}

std::vector<Edge> edges_of_kind(const Cfg& g, EdgeKind k) {
  std::vector<Edge> out;
  for (const auto& e : g.edges())
    if (e.kind == k) out.push_back(e);
  return out;
}

}  // namespace

std::vector<FunctionBoundary> assign_function_boundaries(const Cfg& g,
                                                         bool parallel) {
  std::vector<Address> entries;
  for (const auto& [a, f] : g.entries()) entries.push_back(a);
  std::vector<FunctionBoundary> out(entries.size());
  if (parallel) {
    tbb::parallel_for(std::size_t{0}, entries.size(), [&](std::size_t i) {
      out[i] = boundary_of(g, entries[i]);
    });
  } else {
    for (std::size_t i = 0; i < entries.size(); ++i)
      out[i] = boundary_of(g, entries[i]);
  }
  return out;
}

bool correct_tail_calls(Cfg& g, const std::vector<FunctionBoundary>& bounds,
                        FlipLedger& ledger) {
  bool changed = false;
  auto flip = [&](const Edge& e, EdgeKind to) {
    g.remove_edge(e);
    g.add_edge({e.source, e.target, to});
    ledger.record(e.source, e.target);
    changed = true;
  };

  // 1: a branch to code that is also called is a tail call.
  for (const auto& e : edges_of_kind(g, EdgeKind::Direct))
    if (ledger.can_flip(e.source, e.target) && has_incoming_call(g, e.target))
      flip(e, EdgeKind::TailCall);

  // 2: a tail call that stays inside its own function is a plain branch.
  auto tail = edges_of_kind(g, EdgeKind::TailCall);
  std::unordered_map<Address, std::vector<std::size_t>> owners;
  for (const auto& e : tail) owners[e.source];
  for (std::size_t i = 0; i < bounds.size(); ++i)
    for (Address b : bounds[i].blocks)
      if (auto it = owners.find(b); it != owners.end()) it->second.push_back(i);
  for (const auto& e : tail) {
    if (!ledger.can_flip(e.source, e.target)) continue;
    const auto& own = owners[e.source];
    bool inside = std::any_of(own.begin(), own.end(), [&](std::size_t i) {
      return bounds[i].contains(e.target);
    });
    if (inside) flip(e, EdgeKind::Direct);
  }

  // 3: the only way into the target is this tail call: outlined code.
  for (const auto& e : edges_of_kind(g, EdgeKind::TailCall)) {
    if (!ledger.can_flip(e.source, e.target) || g.in_degree(e.target) != 1)
      continue;
    flip(e, EdgeKind::Direct);
    if (const auto* f = g.entry(e.target); f && !f->seed)
      g.remove_entry(e.target);
  }
  return changed;
}

namespace {

std::size_t prune_entries(Cfg& g) {
  std::vector<Address> doomed;
  for (const auto& [a, f] : g.entries()) {
    if (f.seed) continue;
    bool called = false;
    for (const auto& e : g.in_edges(a))
      if (e.kind == EdgeKind::Call || e.kind == EdgeKind::TailCall) {
        called = true;
        break;
      }
    if (!called) doomed.push_back(a);
  }
  for (Address a : doomed) g.remove_entry(a);
  return doomed.size();
}

}  // namespace

Cfg finalize(Cfg g, const Image& image, TableRegistry& registry,
             FinalizeStats* stats, FinalizeOptions opts) {
  FinalizeStats st;
  st.input_edges = g.edges().size();
  st.tables_trimmed = trim_overlapping_tables(g, image, registry);

  FlipLedger ledger;
  while (true) {
    while (true) {
      ++st.iterations;
      auto bounds = assign_function_boundaries(g, opts.parallel);
      if (!correct_tail_calls(g, bounds, ledger)) break;
    }
    std::size_t pruned = prune_entries(g);
    st.entries_pruned += pruned;
    std::size_t removed = prune_unreachable(g);
    st.blocks_removed += removed;
    if (pruned == 0 && removed == 0) break;
  }
  for (const auto& d : registry.sorted())
    if (const Block* b = g.block_ending_at(d.owner_end))
      registry.set_owner_block(d.base, b->start);
  st.flips = ledger.total();
  if (stats) *stats = st;
  return g;
}

}  // namespace pcfg
