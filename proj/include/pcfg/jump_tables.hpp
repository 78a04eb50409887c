#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <tbb/concurrent_hash_map.h>

#include "pcfg/cfg.hpp"

namespace pcfg {

struct TableDescriptor {
  Address base = 0;
  std::uint32_t declared_bound = 0;
  std::uint32_t effective_bound = 0;
  std::uint32_t final_bound = 0;  // after overlap trimming
  Address owner_block = 0;        // start of the owning block, filled at export
  Address owner_end = 0;          // end of the IJmpTable block; split-stable
  bool clamped = false;           // read stopped at the end of data

  bool operator==(const TableDescriptor&) const = default;
};

struct TableAnalysis {
  std::uint32_t effective_bound = 0;
  std::vector<Address> targets;  // sorted, unique, all inside text
  bool clamped = false;
};

/// In-text targets stored at indices [lo, hi) of the table at `base`, in
/// index order. Reads stop at the end of the data section.
std::vector<Address> read_table(const Image& image, Address base,
                                std::uint32_t lo, std::uint32_t hi,
                                bool* clamped = nullptr);

/// The pure core: effective bound is the max of the declared bound and every
/// predecessor hint.
TableAnalysis resolve_table(const Image& image, Address base,
                            std::uint16_t declared,
                            std::span<const std::uint16_t> hints);

/// Start of the fall-through chain that ends with the block at `start`.
Address chain_start(const Cfg& g, Address start);

/// Hints of the intra-procedural direct predecessors of the IJmpTable block
/// at `start`. Predecessors are taken over its whole fall-through chain, and
/// each predecessor's hint is the last BoundHint in its own chain, so the
/// result does not depend on where blocks happen to be split.
std::vector<std::uint16_t> predecessor_hints(const Cfg& g, const Image& image,
                                             Address start);

/// Throws NotIndirectTerminator unless the block ends in IJmpTable.
TableAnalysis analyze_ijmp(const Cfg& g, const Image& image, Address start);

/// One descriptor per table base. Concurrent-safe; effective bounds only grow.
class TableRegistry {
 public:
  TableRegistry() = default;
  TableRegistry(const TableRegistry& o);
  TableRegistry& operator=(const TableRegistry& o);

  /// Returns true if the descriptor is new or its effective bound grew.
  bool record(Address base, std::uint32_t declared, std::uint32_t effective,
              Address owner_end, bool clamped);
  std::optional<TableDescriptor> find(Address base) const;
  void set_final_bound(Address base, std::uint32_t bound);
  void set_owner_block(Address base, Address start);
  /// Descriptors sorted by base.
  std::vector<TableDescriptor> sorted() const;
  std::size_t size() const { return map_.size(); }

 private:
  tbb::concurrent_hash_map<Address, TableDescriptor> map_;
};

}  // namespace pcfg
