#pragma once

#include <compare>
#include <cstdint>
#include <tuple>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pcfg/image.hpp"

namespace pcfg {

// The ordinal order is part of the canonical sort order.
enum class EdgeKind : std::uint8_t {
  Direct,
  CondTaken,
  CondFallthrough,
  Call,
  CallFallthrough,
  Return,
  IndirectResolved,
  TailCall,
  Fallthrough,  // implicit flow between the parts of a split block
};

const char* to_string(EdgeKind k);
std::optional<EdgeKind> parse_edge_kind(std::string_view s);

/// Edges that stay inside a function when computing boundaries.
constexpr bool is_intraprocedural(EdgeKind k) {
  return k != EdgeKind::Call && k != EdgeKind::TailCall &&
         k != EdgeKind::Return;
}

enum class ReturnStatus : std::uint8_t { Unset, Return, NoReturn };

const char* to_string(ReturnStatus s);

/// Basic block [start, end). A block without terminator ends because the
/// next address starts another block.
struct Block {
  Address start = 0;
  Address end = 0;
  std::optional<Instruction> terminator;
};

struct Edge {
  Address source = 0;  // start of the source block
  Address target = 0;  // start of a block or a candidate
  EdgeKind kind = EdgeKind::Direct;

  auto operator<=>(const Edge&) const = default;
};

struct FunctionEntry {
  Address entry = 0;
  std::optional<std::string> name;
  ReturnStatus status = ReturnStatus::Unset;
  bool seed = false;
};

/// The CFG tuple <B, C, E, F> as a sequential value type.
///
/// Blocks are kept in a multimap so that invalid graphs (duplicate starts)
/// remain representable for validate(); every operation in this library
/// preserves uniqueness.
class Cfg {
 public:
  using BlockMap = std::multimap<Address, Block>;

  const BlockMap& blocks() const { return blocks_; }
  const std::set<Address>& candidates() const { return candidates_; }
  const std::set<Edge>& edges() const { return edges_; }
  const std::map<Address, FunctionEntry>& entries() const { return entries_; }

  const Block* block_at(Address start) const;
  /// Block with start <= a < end.
  const Block* block_containing(Address a) const;
  const Block* block_ending_at(Address end) const;
  /// First block whose start is strictly greater than `a`.
  const Block* next_block_after(Address a) const;
  bool is_node(Address a) const {
    return block_at(a) != nullptr || candidates_.contains(a);
  }

  void add_block(Block b);
  void remove_block(Address start);
  void set_block_end(Address start, Address end);
  void set_terminator(Address start, std::optional<Instruction> t);

  bool add_candidate(Address a) { return candidates_.insert(a).second; }
  bool remove_candidate(Address a) { return candidates_.erase(a) != 0; }

  bool add_edge(const Edge& e);
  bool remove_edge(const Edge& e);
  bool has_edge(const Edge& e) const { return edges_.contains(e); }
  /// Edges whose source is `source`, in canonical order.
  std::vector<Edge> out_edges(Address source) const;
  /// Edges whose target is `target`, ordered by (source, kind).
  std::vector<Edge> in_edges(Address target) const;
  std::size_t in_degree(Address target) const;

  bool add_entry(FunctionEntry f);
  bool remove_entry(Address entry) { return entries_.erase(entry) != 0; }
  bool has_entry(Address a) const { return entries_.contains(a); }
  FunctionEntry* entry(Address a);
  const FunctionEntry* entry(Address a) const;

  /// Equality over the canonical components (block ranges, candidates,
  /// edges, entry addresses with status and seed flag).
  bool operator==(const Cfg& o) const;

 private:
  struct ByTarget {
    bool operator()(const Edge& a, const Edge& b) const {
      return std::tie(a.target, a.source, a.kind) <
             std::tie(b.target, b.source, b.kind);
    }
  };

  BlockMap blocks_;
  std::set<Address> candidates_;
  std::set<Edge> edges_;
  std::set<Edge, ByTarget> in_;
  std::map<Address, FunctionEntry> entries_;
};

struct Violation {
  enum class Kind {
    EmptyBlock,
    DuplicateBlockStart,
    DuplicateBlockEnd,
    OverlappingBlocks,
    CandidateIsBlock,
    DanglingEdgeSource,
    DanglingEdgeTarget,
    CallFallthroughTarget,
    EdgeKindMismatch,
    EntryNotNode,
    OutsideText,
    TerminatorMismatch,
    InteriorControlFlow,
  };
  Kind kind;
  std::vector<Address> addrs;

  std::string describe() const;
  bool operator==(const Violation&) const = default;
};

const char* to_string(Violation::Kind k);

/// Checks every structural invariant of the graph. With an image, also checks
/// that each terminator matches the decoded final instruction and that no
/// other control-flow instruction lies inside a block.
std::vector<Violation> validate(const Cfg& g, const Image* image = nullptr);

/// g1 is below g2 in the construction order: address coverage, explicit
/// edges (by source end and target start), implicit flow chains, and entry
/// labels are all preserved. Throws InvalidGraph if either graph is invalid.
bool partial_order_le(const Cfg& g1, const Cfg& g2, const Image& image);

/// Deterministic text form: header counts, then B, C, E and F records.
std::string canonical_serialize(const Cfg& g);

/// Maximal [lo, hi) intervals covered by the given blocks.
std::vector<std::pair<Address, Address>> merge_ranges(
    std::vector<std::pair<Address, Address>> ranges);

}  // namespace pcfg
