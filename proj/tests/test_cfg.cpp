#include <gtest/gtest.h>

#include <random>

#include "pcfg/cfg.hpp"
#include "pcfg/serial_ops.hpp"
#include "pcfg/workload.hpp"
#include "support.hpp"

using namespace pcfg;
using namespace pcfg::test;

namespace {

// 0x4: Alu; 0x7: Alu; 0xA: Nop; 0xB: Nop; 0xC: Ret -> block [0x4,0xD)
Image fig_image() {
  Code c(0x0);
  for (int i = 0; i < 4; ++i) c.op(InstrKind::Nop);
  c.alu(2);
  c.op(InstrKind::Nop);
  c.op(InstrKind::Nop);
  c.ret();
  c.halt();
  return image_of(c, {fn(0x4, "f")});
}

Instruction at(const Image& img, Address a) { return decode(img, a); }

Cfg one_block(const Image& img) {
  Cfg g;
  g.add_block({0x4, 0xD, at(img, 0xC)});
  g.add_entry({0x4, "f", ReturnStatus::Return, true});
  return g;
}

bool has_kind(const std::vector<Violation>& vs, Violation::Kind k) {
  for (const auto& v : vs)
    if (v.kind == k) return true;
  return false;
}

}  // namespace

TEST(Validate, EmptyGraph) { EXPECT_TRUE(validate(Cfg{}).empty()); }

TEST(Validate, DuplicateStart) {
  Cfg g;
  g.add_block({0x10, 0x20, std::nullopt});
  g.add_block({0x10, 0x18, std::nullopt});
  auto vs = validate(g);
  ASSERT_TRUE(has_kind(vs, Violation::Kind::DuplicateBlockStart));
  for (const auto& v : vs) {
    if (v.kind == Violation::Kind::DuplicateBlockStart) {
      EXPECT_EQ(v.addrs, std::vector<Address>{0x10});
    }
  }
}

TEST(Validate, DanglingSourceAndTarget) {
  Cfg g;
  g.add_block({0x10, 0x20, std::nullopt});
  g.add_edge({0x30, 0x10, EdgeKind::Fallthrough});
  g.add_edge({0x10, 0x40, EdgeKind::Fallthrough});
  auto vs = validate(g);
  EXPECT_TRUE(has_kind(vs, Violation::Kind::DanglingEdgeSource));
  EXPECT_TRUE(has_kind(vs, Violation::Kind::DanglingEdgeTarget));
}

TEST(Validate, StructuralBreaches) {
  Cfg g;
  g.add_block({0x10, 0x10, std::nullopt});
  g.add_block({0x20, 0x30, std::nullopt});
  g.add_block({0x28, 0x30, std::nullopt});
  g.add_candidate(0x20);
  g.add_entry({0x99, {}, ReturnStatus::Unset, false});
  auto vs = validate(g);
  EXPECT_TRUE(has_kind(vs, Violation::Kind::EmptyBlock));
  EXPECT_TRUE(has_kind(vs, Violation::Kind::DuplicateBlockEnd));
  EXPECT_TRUE(has_kind(vs, Violation::Kind::OverlappingBlocks));
  EXPECT_TRUE(has_kind(vs, Violation::Kind::CandidateIsBlock));
  EXPECT_TRUE(has_kind(vs, Violation::Kind::EntryNotNode));
}

TEST(Validate, EdgeKindsMustMatchTerminators) {
  auto img = fig_image();
  Cfg g = one_block(img);
  g.add_candidate(0x0);
  g.add_edge({0x4, 0x0, EdgeKind::Direct});
  g.add_edge({0x4, 0x0, EdgeKind::CallFallthrough});
  auto vs = validate(g, &img);
  EXPECT_TRUE(has_kind(vs, Violation::Kind::EdgeKindMismatch));
  EXPECT_TRUE(has_kind(vs, Violation::Kind::CallFallthroughTarget));
}

TEST(Validate, ImageChecks) {
  auto img = fig_image();
  Cfg g;
  g.add_block({0x4, 0xE, at(img, 0xD)});  // swallows the Ret
  auto vs = validate(g, &img);
  EXPECT_TRUE(has_kind(vs, Violation::Kind::InteriorControlFlow));
  Cfg h;
  h.add_block({0x4, 0xD, at(img, 0x7)});
  EXPECT_TRUE(has_kind(validate(h, &img), Violation::Kind::TerminatorMismatch));
  EXPECT_TRUE(validate(one_block(img), &img).empty());
}

TEST(PartialOrder, Reflexive) {
  auto img = fig_image();
  auto g = one_block(img);
  EXPECT_TRUE(partial_order_le(g, g, img));
}

TEST(PartialOrder, SplitIsLarger) {
  auto img = fig_image();
  auto g1 = one_block(img);
  Cfg g2;
  g2.add_block({0x4, 0xA, std::nullopt});
  g2.add_block({0xA, 0xD, at(img, 0xC)});
  g2.add_edge({0x4, 0xA, EdgeKind::Fallthrough});
  g2.add_entry({0x4, "f", ReturnStatus::Return, true});
  EXPECT_TRUE(partial_order_le(g1, g2, img));
  EXPECT_FALSE(partial_order_le(g2, g1, img));
}

TEST(PartialOrder, LosingAnEntryIsNotLarger) {
  auto img = fig_image();
  auto g1 = one_block(img);
  auto g2 = g1;
  g2.remove_entry(0x4);
  EXPECT_FALSE(partial_order_le(g1, g2, img));
}

TEST(PartialOrder, InvalidInputThrows) {
  auto img = fig_image();
  Cfg bad;
  bad.add_block({0x4, 0x4, std::nullopt});
  EXPECT_THROW(partial_order_le(bad, one_block(img), img), InvalidGraph);
}

TEST(Canonical, EmptyGraphHeader) {
  EXPECT_EQ(canonical_serialize(Cfg{}),
            "pcfg-canonical 1\nblocks 0\ncandidates 0\nedges 0\nentries 0\n");
}

TEST(Canonical, InsertionOrderIrrelevant) {
  auto img = fig_image();
  Cfg a, b;
  Block b1{0x4, 0xA, std::nullopt}, b2{0xA, 0xD, at(img, 0xC)};
  Edge e{0x4, 0xA, EdgeKind::Fallthrough};
  a.add_block(b1);
  a.add_block(b2);
  a.add_edge(e);
  a.add_entry({0x4, {}, ReturnStatus::Return, true});
  a.add_entry({0xA, {}, ReturnStatus::Unset, false});
  b.add_entry({0xA, {}, ReturnStatus::Unset, false});
  b.add_block(b2);
  b.add_edge(e);
  b.add_entry({0x4, {}, ReturnStatus::Return, true});
  b.add_block(b1);
  EXPECT_EQ(a, b);
  EXPECT_EQ(canonical_serialize(a), canonical_serialize(b));
  EXPECT_EQ(canonical_serialize(a),
            "pcfg-canonical 1\nblocks 2\ncandidates 0\nedges 1\nentries 2\n"
            "B 0x4 0xa\nB 0xa 0xd\nE 0x4 0xa Fallthrough\n"
            "F 0x4 RETURN 1\nF 0xa UNSET 0\n");
  b.add_candidate(0x0);
  EXPECT_NE(canonical_serialize(a), canonical_serialize(b));
}

TEST(Canonical, RejectsInvalid) {
  Cfg g;
  g.add_edge({0x1, 0x2, EdgeKind::Direct});
  EXPECT_THROW(canonical_serialize(g), InvalidGraph);
}

TEST(EdgeKinds, NamesRoundTrip) {
  for (int k = 0; k <= static_cast<int>(EdgeKind::Fallthrough); ++k) {
    auto kind = static_cast<EdgeKind>(k);
    EXPECT_EQ(parse_edge_kind(to_string(kind)), kind);
  }
  EXPECT_FALSE(parse_edge_kind("Bogus"));
  EXPECT_FALSE(is_intraprocedural(EdgeKind::TailCall));
  EXPECT_TRUE(is_intraprocedural(EdgeKind::CallFallthrough));
}

TEST(MergeRanges, Basics) {
  EXPECT_EQ(merge_ranges({{5, 9}, {0, 5}, {12, 14}, {13, 20}, {30, 30}}),
            (std::vector<std::pair<Address, Address>>{{0, 9}, {12, 20}}));
}

// Chains G0 <= G1 <= ... built by the increasing operations; the order must
// hold between every pair (reflexive and transitive on real chains).
TEST(PartialOrder, ChainsFromGeneratedImages) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto sc = generate({Family::BigRandom, {{"functions", 12}}, seed});
    const auto& img = sc.image;
    std::vector<Cfg> chain{initial_graph(img)};
    std::mt19937_64 rng(seed);
    for (int step = 0; step < 40; ++step) {
      Cfg g = chain.back();
      if (!g.candidates().empty()) {
        auto it = g.candidates().begin();
        std::advance(it, rng() % g.candidates().size());
        Address t = *it;
        apply_ber(g, img, t);
        const Block* b = g.block_at(t);
        if (b->terminator) {
          auto k = b->terminator->kind;
          if (k == InstrKind::JmpDirect || k == InstrKind::JccDirect ||
              k == InstrKind::Call)
            apply_dec(g, img, t);
          else if (k == InstrKind::IJmpTable)
            apply_iec(g, img, t);
        }
      } else {
        break;
      }
      ASSERT_TRUE(validate(g, &img).empty());
      chain.push_back(std::move(g));
    }
    for (std::size_t i = 0; i < chain.size(); i += 3)
      for (std::size_t j = i; j < chain.size(); j += 5)
        EXPECT_TRUE(partial_order_le(chain[i], chain[j], img)) << i << "<=" << j;
  }
}
