#pragma once

#include <span>
#include <vector>

#include "pcfg/cfg.hpp"
#include "pcfg/jump_tables.hpp"

namespace pcfg {

// In-place forms of the six graph operations. The op_* wrappers below take
// and return whole graphs.

enum class BerCase { Split, EarlyEnd, Linear };

/// Block end resolution for candidate `t`. Throws NotACandidate.
BerCase apply_ber(Cfg& g, const Image& image, Address t);

/// Direct edges for the block at `start`; returns the edges actually added.
/// Targets outside text get no edge.
std::vector<Edge> apply_dec(Cfg& g, const Image& image, Address start);

/// Appends the call fall-through edge when the callee returns. Throws
/// CalleeUnset for an UNSET callee.
bool apply_cfec(Cfg& g, const Image& image, const Edge& call_edge,
                ReturnStatus callee_status);

/// Indirect edges for the block at `start`; records the table when a registry
/// is given. Returns the edges actually added.
std::vector<Edge> apply_iec(Cfg& g, const Image& image, Address start,
                            TableRegistry* registry = nullptr);

/// Function entry identification: Call edges label their target; Direct
/// edges go through the tail-call heuristics (known entry, intra-procedural
/// reachability, frame teardown). Throws EdgeNotFound.
void apply_fei(Cfg& g, const Image& image, const Edge& e);

/// Edge removal with the reachability cascade. F is kept.
void apply_er(Cfg& g, const Edge& e);
/// Removes all of `es` at once, then drops what is unreachable from F.
void apply_er_batch(Cfg& g, std::span<const Edge> es);

Cfg op_ber(Cfg g, const Image& image, Address t);
Cfg op_dec(Cfg g, const Image& image, Address start);
Cfg op_cfec(Cfg g, const Image& image, const Edge& call_edge,
            ReturnStatus callee_status);
Cfg op_iec(Cfg g, const Image& image, Address start);
Cfg op_fei(Cfg g, const Image& image, const Edge& e);
Cfg op_er(Cfg g, const Edge& e);

/// G0: one candidate and one seeded entry per distinct function symbol
/// offset. Known non-returning symbols start as NORETURN.
Cfg initial_graph(const Image& image);

/// Name for an entry: the smallest mangled name among the function symbols
/// at that offset.
std::optional<std::string> entry_name(const Image& image, Address a);

/// Seed offsets in symbol-table order, deduplicated.
std::vector<Address> seed_order(const Image& image);

/// Entries that reach a Ret block over non-Call edges.
std::vector<Address> entries_reaching_return(const Cfg& g);

/// Applies branch-edge entry identification to every Direct edge in canonical
/// order, then gives new heuristic entries their return status. Both
/// constructors run this once traversal has stabilized.
void identify_tail_calls(Cfg& g, const Image& image);

struct SerialOptions {
  bool reverse_seed_order = false;  // process seeds last-to-first
  bool finalize = true;
};

struct ConstructResult {
  Cfg graph;
  TableRegistry tables;
};

/// The reference constructor: FIFO traversal, noreturn fixed point, jump
/// table fixed point, tail-call identification, then finalization.
ConstructResult serial_construct_full(const Image& image,
                                      SerialOptions opts = {});
Cfg serial_construct(const Image& image, SerialOptions opts = {});

}  // namespace pcfg
