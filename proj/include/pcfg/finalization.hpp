#pragma once

#include <algorithm>
#include <map>
#include <utility>
#include <vector>

#include "pcfg/cfg.hpp"
#include "pcfg/jump_tables.hpp"

namespace pcfg {

struct FunctionBoundary {
  Address entry = 0;
  std::vector<Address> blocks;  // sorted block starts

  bool contains(Address a) const;
  bool operator==(const FunctionBoundary&) const = default;
};

/// Per-edge flip counts keyed by (source, target). No edge flips twice.
class FlipLedger {
 public:
  bool can_flip(Address src, Address dst) const {
    return !flips_.contains({src, dst});
  }
  void record(Address src, Address dst) {
    ++flips_[{src, dst}];
    ++total_;
  }
  std::size_t total() const { return total_; }
  int count(Address src, Address dst) const {
    auto it = flips_.find({src, dst});
    return it == flips_.end() ? 0 : it->second;
  }
  int max_count() const {
    int m = 0;
    for (const auto& [k, n] : flips_) m = std::max(m, n);
    return m;
  }

 private:
  std::map<std::pair<Address, Address>, int> flips_;
  std::size_t total_ = 0;
};

/// Removes every block, candidate and edge not reachable from an entry in F.
/// Returns the number of blocks removed.
std::size_t prune_unreachable(Cfg& g);

/// Trims each table whose extent runs into the next table's base and removes
/// the trimmed-off indirect edges with one batched edge removal. Fills in
/// final bounds and owner blocks. Returns the number of tables trimmed.
std::size_t trim_overlapping_tables(Cfg& g, const Image& image,
                                    TableRegistry& registry);

/// One boundary per entry: blocks reachable over intra-procedural edges.
std::vector<FunctionBoundary> assign_function_boundaries(const Cfg& g,
                                                         bool parallel = false);

/// One pass of the three tail-call rules, each swept over its edges in
/// canonical order. Returns true if any edge flipped.
bool correct_tail_calls(Cfg& g, const std::vector<FunctionBoundary>& bounds,
                        FlipLedger& ledger);

struct FinalizeStats {
  std::size_t tables_trimmed = 0;
  std::size_t flips = 0;
  std::size_t iterations = 0;
  std::size_t entries_pruned = 0;
  std::size_t blocks_removed = 0;
  std::size_t input_edges = 0;
};

struct FinalizeOptions {
  bool parallel = false;
};

Cfg finalize(Cfg g, const Image& image, TableRegistry& registry,
             FinalizeStats* stats = nullptr, FinalizeOptions opts = {});

}  // namespace pcfg
