#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <thread>

#include "pcfg/symtab.hpp"

using namespace pcfg;

namespace {

template <class F>
void on_threads(unsigned n, F f) {
  std::vector<std::thread> ts;
  for (unsigned t = 0; t < n; ++t) ts.emplace_back(f, t);
  for (auto& t : ts) t.join();
}

}  // namespace

TEST(Symtab, RacingInsertsHaveOneWinner) {
  for (int round = 0; round < 50; ++round) {
    IndexedSymbols st;
    std::atomic<int> wins{0};
    auto s = SymbolEntry::make(0x1000, "main");
    on_threads(8, [&](unsigned) { wins += st.insert(s); });
    EXPECT_EQ(wins.load(), 1);
    st.seal();
    EXPECT_EQ(st.lookup_by_offset(0x1000).size(), 1u);
    EXPECT_EQ(st.lookup_by_pretty("main").size(), 1u);
  }
}

TEST(Symtab, ReinsertReturnsFalse) {
  IndexedSymbols st;
  auto s = SymbolEntry::make(0x1000, "f");
  EXPECT_TRUE(st.insert(s));
  EXPECT_FALSE(st.insert(s));
  EXPECT_TRUE(st.insert(SymbolEntry::make(0x1004, "f")));  // other offset
  EXPECT_EQ(st.size(), 2u);
}

TEST(Symtab, PrettyNamesAreMultimapped) {
  IndexedSymbols st;
  st.insert(SymbolEntry::make(0x1000, "f$1"));
  st.insert(SymbolEntry::make(0x2000, "f$2"));
  st.insert(SymbolEntry::make(0x1000, "g"));
  st.seal();
  auto fs = st.lookup_by_pretty("f");
  ASSERT_EQ(fs.size(), 2u);
  std::set<Address> offs{fs[0].offset, fs[1].offset};
  EXPECT_EQ(offs, (std::set<Address>{0x1000, 0x2000}));
  EXPECT_EQ(st.lookup_by_offset(0x1000).size(), 2u);
  EXPECT_EQ(st.lookup_by_mangled("f$1").size(), 1u);
}

TEST(Symtab, MissIsEmpty) {
  IndexedSymbols st;
  st.seal();
  EXPECT_TRUE(st.lookup_by_offset(0x1000).empty());
  EXPECT_TRUE(st.lookup_by_mangled("x").empty());
  EXPECT_TRUE(st.lookup_by_pretty("x").empty());
  EXPECT_TRUE(st.lookup_by_typed("x").empty());
}

TEST(Symtab, FourKeyRoundTrip) {
  IndexedSymbols st;
  auto f = SymbolEntry::make(0x1000, "work$cold", SymbolKind::Func, true);
  auto o = SymbolEntry::make(0x8000, "table", SymbolKind::Object);
  st.insert(f);
  st.insert(o);
  st.seal();
  for (const auto& s : {f, o}) {
    EXPECT_EQ(st.lookup_by_offset(s.offset), std::vector<SymbolEntry>{s});
    EXPECT_EQ(st.lookup_by_mangled(s.mangled), std::vector<SymbolEntry>{s});
    EXPECT_EQ(st.lookup_by_pretty(s.pretty), std::vector<SymbolEntry>{s});
    EXPECT_EQ(st.lookup_by_typed(s.typed), std::vector<SymbolEntry>{s});
  }
  EXPECT_EQ(f.pretty, "work");
  EXPECT_NE(f.typed, o.typed);
}

TEST(Symtab, PhaseViolations) {
  IndexedSymbols st;
  EXPECT_THROW(st.lookup_by_offset(0), PhaseViolation);
  EXPECT_THROW(st.all(), PhaseViolation);
  st.seal();
  EXPECT_THROW(st.insert(SymbolEntry::make(0, "x")), PhaseViolation);
}

TEST(Symtab, ConcurrentAudit) {
  constexpr unsigned kSyms = 100000, kThreads = 8;
  // Every thread inserts an overlapping slice; names repeat every 1000
  // offsets so the pretty index holds many-entry buckets.
  auto sym = [](unsigned i) {
    return SymbolEntry::make(0x1000 + 4 * i,
                             "s" + std::to_string(i % 1000) + "$" + std::to_string(i));
  };
  IndexedSymbols st;
  std::atomic<unsigned> wins{0};
  on_threads(kThreads, [&](unsigned t) {
    for (unsigned i = t * kSyms / 16; i < kSyms; i += 1 + (t % 2))
      wins += st.insert(sym(i));
    for (unsigned i = 0; i < kSyms; i += kThreads) wins += st.insert(sym(i + t));
  });
  st.seal();
  EXPECT_EQ(wins.load(), kSyms);
  EXPECT_EQ(st.size(), kSyms);
  auto sz = st.index_sizes();
  EXPECT_EQ(sz.offset, kSyms);
  EXPECT_EQ(sz.mangled, kSyms);
  EXPECT_EQ(sz.pretty, kSyms);
  EXPECT_EQ(sz.typed, kSyms);

  auto all = st.all();
  ASSERT_EQ(all.size(), kSyms);
  for (unsigned i = 0; i < kSyms; ++i) EXPECT_EQ(all[i], sym(i));

  std::atomic<unsigned> bad{0};
  on_threads(kThreads, [&](unsigned t) {
    for (unsigned i = t; i < kSyms; i += kThreads) {
      auto s = sym(i);
      bad += st.lookup_by_offset(s.offset) != std::vector<SymbolEntry>{s};
      bad += st.lookup_by_mangled(s.mangled) != std::vector<SymbolEntry>{s};
      bad += st.lookup_by_pretty(s.pretty).size() != kSyms / 1000;
    }
  });
  EXPECT_EQ(bad.load(), 0u);
}
