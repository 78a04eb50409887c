#pragma once

#include <atomic>
#include <string>
#include <utility>
#include <vector>

#include <tbb/concurrent_hash_map.h>

#include "pcfg/image.hpp"

namespace pcfg {

/// Symbol table indexed by offset, mangled, pretty and typed name.
///
/// Two phases: concurrent inserts, then seal(), then concurrent lookups.
/// Crossing phases throws PhaseViolation.
class IndexedSymbols {
 public:
  /// True for exactly one of any number of racing inserts of the same
  /// (offset, mangled) identity. The winner writes every index while holding
  /// the master entry.
  bool insert(const SymbolEntry& s);
  void seal() { sealed_.store(true, std::memory_order_release); }
  bool sealed() const { return sealed_.load(std::memory_order_acquire); }

  std::vector<SymbolEntry> lookup_by_offset(Address offset) const;
  std::vector<SymbolEntry> lookup_by_mangled(const std::string& name) const;
  std::vector<SymbolEntry> lookup_by_pretty(const std::string& name) const;
  std::vector<SymbolEntry> lookup_by_typed(const std::string& name) const;

  /// Every symbol, sorted by (offset, mangled). Read phase only.
  std::vector<SymbolEntry> all() const;
  std::size_t size() const { return master_.size(); }

  struct IndexSizes {
    std::size_t offset = 0, mangled = 0, pretty = 0, typed = 0;
  };
  /// Total entries across each secondary index. Read phase only.
  IndexSizes index_sizes() const;

 private:
  using Identity = std::pair<Address, std::string>;
  struct IdentityHash {
    static std::size_t hash(const Identity& k);
    static bool equal(const Identity& a, const Identity& b) { return a == b; }
  };
  template <typename K>
  using Index = tbb::concurrent_hash_map<K, std::vector<SymbolEntry>>;

  void require_read_phase() const;
  template <typename K>
  static std::vector<SymbolEntry> lookup(const Index<K>& idx, const K& key);

  tbb::concurrent_hash_map<Identity, SymbolEntry, IdentityHash> master_;
  Index<Address> by_offset_;
  Index<std::string> by_mangled_;
  Index<std::string> by_pretty_;
  Index<std::string> by_typed_;
  std::atomic<bool> sealed_{false};
};

}  // namespace pcfg
