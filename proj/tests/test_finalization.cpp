#include <gtest/gtest.h>

#include "pcfg/finalization.hpp"
#include "pcfg/workload.hpp"
#include "support.hpp"

using namespace pcfg;
using namespace pcfg::test;

namespace {

// Hand-made graphs: blocks are 0x10 long and carry no terminator, which is
// all the boundary and tail-call passes look at.
struct G {
  Cfg g;
  G& block(Address s) {
    g.add_block({s, s + 0x10, std::nullopt});
    return *this;
  }
  G& edge(Address s, Address t, EdgeKind k) {
    g.add_edge({s, t, k});
    return *this;
  }
  G& entry(Address a, bool seed = true) {
    g.add_entry({a, std::nullopt, ReturnStatus::Return, seed});
    return *this;
  }
};

std::vector<Scenario> corpus() {
  std::vector<Scenario> out;
  for (auto f : all_families())
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ScenarioSpec spec{f, {}, seed};
      if (f == Family::BigRandom) spec.params["functions"] = 60;
      out.push_back(generate(spec));
    }
  return out;
}

std::set<std::pair<Address, Address>> edge_pairs(const Cfg& g) {
  std::set<std::pair<Address, Address>> out;
  for (const auto& e : g.edges()) out.insert({e.source, e.target});
  return out;
}

template <class S>
bool subset(const S& a, const S& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

std::set<std::pair<Address, Address>> block_ranges(const Cfg& g) {
  std::set<std::pair<Address, Address>> out;
  for (const auto& [s, b] : g.blocks()) out.insert({s, b.end});
  return out;
}

std::set<Address> entry_set(const Cfg& g) {
  std::set<Address> out;
  for (const auto& [a, f] : g.entries()) out.insert(a);
  return out;
}

// Independent trimming oracle: table entries past the next base, minus the
// targets still stored below the trimmed bound.
std::set<Address> cut_targets(const Image& img, const TableDescriptor& d,
                              Address next_base) {
  auto word = [&](Address a) -> std::optional<Address> {
    auto off = a - img.data_base();
    if (a < img.data_base() || off + 4 > img.data().size()) return std::nullopt;
    auto p = img.data().data() + off;
    return Address(p[0]) | Address(p[1]) << 8 | Address(p[2]) << 16 |
           Address(p[3]) << 24;
  };
  std::uint32_t bound = (next_base - d.base) / 4;
  std::set<Address> keep, cut;
  for (std::uint32_t i = 0; i < d.effective_bound; ++i) {
    auto w = word(d.base + 4 * i);
    if (!w || !img.in_text(*w)) continue;
    (i < bound ? keep : cut).insert(*w);
  }
  std::set<Address> out;
  for (Address t : cut)
    if (!keep.contains(t)) out.insert(t);
  return out;
}

}  // namespace

TEST(Trim, OverapproximatedTablesAreCut) {
  for (std::uint64_t extra : {1, 2, 5}) {
    auto sc = generate({Family::JumpTableOverapprox, {{"extra", extra}}, 4});
    auto raw = serial_construct_full(sc.image, {.finalize = false});
    auto tables = raw.tables.sorted();
    ASSERT_EQ(tables.size(), 2u);
    auto doomed = cut_targets(sc.image, tables[0], tables[1].base);
    ASSERT_FALSE(doomed.empty());
    Address owner = raw.graph.block_ending_at(tables[0].owner_end)->start;

    Cfg g = raw.graph;
    auto reg = raw.tables;
    EXPECT_EQ(trim_overlapping_tables(g, sc.image, reg), 1u);
    for (Address t : doomed) {
      EXPECT_TRUE(raw.graph.has_edge({owner, t, EdgeKind::IndirectResolved}));
      EXPECT_FALSE(g.has_edge({owner, t, EdgeKind::IndirectResolved}));
    }
    EXPECT_EQ(raw.graph.edges().size() - g.edges().size(), doomed.size());
    for (const auto& d : reg.sorted()) {
      EXPECT_EQ(d.final_bound, sc.truth.jump_table_sizes.at(d.base));
      EXPECT_EQ(d.owner_block, raw.graph.block_ending_at(d.owner_end)->start);
    }
  }
}

TEST(Trim, DisjointTablesUnchanged) {
  auto sc = generate({Family::JumpTable, {{"entries", 6}}, 1});
  auto raw = serial_construct_full(sc.image, {.finalize = false});
  Cfg g = raw.graph;
  auto reg = raw.tables;
  EXPECT_EQ(trim_overlapping_tables(g, sc.image, reg), 0u);
  EXPECT_EQ(g, raw.graph);
  for (const auto& d : reg.sorted()) EXPECT_EQ(d.final_bound, d.effective_bound);
}

TEST(Trim, TargetAlsoReachedDirectlySurvives) {
  // Table at 0x8000 holds {L1, L2, L3}; the next table starts at 0x8008, so
  // L3 is trimmed, but L3 is also the Jcc target and must stay.
  Code c;
  Address j = c.jcc(0);
  c.ijmp(0x8000, 3);
  Address l1 = c.ret(), l2 = c.ret(), l3 = c.ret();
  c.patch(j, l3);
  Address j2 = c.ijmp(0x8008, 1);
  auto w = [](Address a) { return static_cast<std::uint32_t>(a); };
  auto img = image_of(c, {fn(0x1000, "f"), fn(j2, "g")},
                      words({w(l1), w(l2), w(l3), w(l1)}));
  auto raw = serial_construct_full(img, {.finalize = false});
  Cfg g = raw.graph;
  auto reg = raw.tables;
  EXPECT_EQ(trim_overlapping_tables(g, img, reg), 1u);
  EXPECT_EQ(reg.find(0x8000)->final_bound, 2u);
  EXPECT_FALSE(g.has_edge({0x1005, l3, EdgeKind::IndirectResolved}));
  EXPECT_NE(g.block_at(l3), nullptr);
  EXPECT_TRUE(g.has_edge({0x1000, l3, EdgeKind::CondTaken}));
}

TEST(Boundaries, SharedBlockInBoth) {
  G h;
  h.block(0x100).block(0x200).block(0x300).block(0x400);
  h.edge(0x100, 0x300, EdgeKind::Direct)
      .edge(0x200, 0x300, EdgeKind::Direct)
      .edge(0x300, 0x400, EdgeKind::TailCall);
  h.entry(0x100).entry(0x200).entry(0x400);
  auto b = assign_function_boundaries(h.g);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].blocks, (std::vector<Address>{0x100, 0x300}));
  EXPECT_EQ(b[1].blocks, (std::vector<Address>{0x200, 0x300}));
  EXPECT_EQ(b[2].blocks, (std::vector<Address>{0x400}));
  EXPECT_FALSE(b[0].contains(0x400));
  EXPECT_EQ(assign_function_boundaries(h.g, true), b);
}

TEST(Boundaries, ParallelMatchesSerialOnCorpus) {
  for (const auto& sc : corpus()) {
    auto g = serial_construct(sc.image);
    EXPECT_EQ(assign_function_boundaries(g, true),
              assign_function_boundaries(g, false));
  }
}

TEST(TailCallRules, BranchToCalledCodeBecomesTailCall) {
  G h;
  h.block(0x100).block(0x200).block(0x300);
  h.edge(0x100, 0x300, EdgeKind::Direct).edge(0x200, 0x300, EdgeKind::Call);
  h.entry(0x100).entry(0x200).entry(0x300);
  FlipLedger ledger;
  // Boundaries are computed before the pass; rule 2 would flip the edge
  // back, but the ledger forbids a second flip.
  auto bounds = assign_function_boundaries(h.g);
  EXPECT_TRUE(correct_tail_calls(h.g, bounds, ledger));
  EXPECT_TRUE(h.g.has_edge({0x100, 0x300, EdgeKind::TailCall}));
  EXPECT_EQ(ledger.count(0x100, 0x300), 1);
  EXPECT_EQ(ledger.total(), 1u);
  EXPECT_FALSE(correct_tail_calls(h.g, assign_function_boundaries(h.g), ledger));
}

TEST(TailCallRules, TailCallInsideOwnFunctionBecomesBranch) {
  G h;
  h.block(0x100).block(0x110).block(0x300).block(0x500);
  h.edge(0x100, 0x300, EdgeKind::CondTaken)
      .edge(0x100, 0x110, EdgeKind::CondFallthrough)
      .edge(0x110, 0x300, EdgeKind::TailCall)
      .edge(0x500, 0x300, EdgeKind::TailCall);
  h.entry(0x100).entry(0x500);
  FlipLedger ledger;
  correct_tail_calls(h.g, assign_function_boundaries(h.g), ledger);
  EXPECT_TRUE(h.g.has_edge({0x110, 0x300, EdgeKind::Direct}));
  EXPECT_TRUE(h.g.has_edge({0x500, 0x300, EdgeKind::TailCall}));
}

TEST(TailCallRules, SoleTailCallIsOutlinedCode) {
  for (bool seed : {false, true}) {
    G h;
    h.block(0x100).block(0x400);
    h.edge(0x100, 0x400, EdgeKind::TailCall);
    h.entry(0x100).entry(0x400, seed);
    FlipLedger ledger;
    correct_tail_calls(h.g, assign_function_boundaries(h.g), ledger);
    EXPECT_TRUE(h.g.has_edge({0x100, 0x400, EdgeKind::Direct}));
    EXPECT_EQ(h.g.has_entry(0x400), seed);
  }
}

TEST(Finalize, OutlinedColdLosesItsEntry) {
  auto sc = generate({Family::OutlinedCold, {}, 0});
  auto raw = serial_construct_full(sc.image, {.finalize = false});
  auto reg = raw.tables;
  FinalizeStats st;
  auto g = finalize(raw.graph, sc.image, reg, &st);
  EXPECT_GT(entry_set(raw.graph).size(), entry_set(g).size());
  EXPECT_GE(st.flips, 1u);
  for (const auto& e : g.edges()) {
    if (e.kind != EdgeKind::TailCall) continue;
    const Block* b = g.block_at(e.source);
    EXPECT_TRUE(sc.truth.tailcall_edges.contains(
        {b->terminator->addr, e.target}));
  }
  EXPECT_EQ(compare(sc.truth, observe(g, reg))[0].diffs,
            std::vector<std::string>{});
}

TEST(Finalize, HeuristicEntryPrunedSeedsKept) {
  G h;
  h.block(0x100).block(0x200).block(0x300);
  h.edge(0x100, 0x200, EdgeKind::Direct);
  h.entry(0x100).entry(0x200, false).entry(0x300, true);
  Image img(0x100, std::vector<std::uint8_t>(0x210, 0), 0x8000, {}, {});
  TableRegistry reg;
  FinalizeStats st;
  auto g = finalize(h.g, img, reg, &st);
  EXPECT_EQ(entry_set(g), (std::set<Address>{0x100, 0x300}));
  EXPECT_NE(g.block_at(0x200), nullptr);  // still reached from 0x100
  EXPECT_EQ(st.entries_pruned, 1u);
}

TEST(PruneUnreachable, DropsOrphans) {
  G h;
  h.block(0x100).block(0x200).block(0x300);
  h.g.add_candidate(0x400);
  h.g.add_candidate(0x500);
  h.edge(0x100, 0x200, EdgeKind::Direct)
      .edge(0x100, 0x400, EdgeKind::CondTaken)
      .edge(0x300, 0x500, EdgeKind::Direct);
  h.entry(0x100);
  EXPECT_EQ(prune_unreachable(h.g), 1u);
  EXPECT_EQ(h.g.block_at(0x300), nullptr);
  EXPECT_EQ(h.g.candidates(), std::set<Address>{0x400});
  EXPECT_FALSE(h.g.has_edge({0x300, 0x500, EdgeKind::Direct}));
}

TEST(Finalize, CorpusProperties) {
  for (const auto& sc : corpus()) {
    auto raw = serial_construct_full(sc.image, {.finalize = false});
    auto reg = raw.tables;
    FinalizeStats st;
    auto once = finalize(raw.graph, sc.image, reg, &st);
    EXPECT_LE(st.flips, st.input_edges);
    EXPECT_EQ(st.input_edges, raw.graph.edges().size());
    EXPECT_TRUE(subset(edge_pairs(once), edge_pairs(raw.graph)));
    EXPECT_TRUE(subset(block_ranges(once), block_ranges(raw.graph)));
    EXPECT_TRUE(subset(entry_set(once), entry_set(raw.graph)));
    EXPECT_TRUE(validate(once, &sc.image).empty());

    auto reg2 = reg;
    auto twice = finalize(once, sc.image, reg2);
    EXPECT_EQ(canonical_serialize(twice), canonical_serialize(once));
    EXPECT_EQ(reg2.sorted(), reg.sorted());

    auto reg3 = raw.tables;
    auto par = finalize(raw.graph, sc.image, reg3, nullptr, {.parallel = true});
    EXPECT_EQ(canonical_serialize(par), canonical_serialize(once));
  }
}
