#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <map>
#include <mutex>
#include <optional>
#include <unordered_set>
#include <vector>

#include <tbb/concurrent_hash_map.h>
#include <tbb/concurrent_vector.h>
#include <tbb/enumerable_thread_specific.h>

#include "pcfg/cfg.hpp"
#include "pcfg/finalization.hpp"
#include "pcfg/jump_tables.hpp"

namespace pcfg {

struct EngineOptions {
  unsigned workers = 1;
  /// Listing-style rounds: each round traverses the pending functions with a
  /// parallel loop, and new functions wait for the next round.
  bool level_synchronous = false;
  bool finalize = true;
};

/// Instrumentation snapshot of one run.
struct EngineCounters {
  std::uint64_t blocks_created = 0;       // winning start insertions
  std::uint64_t start_attempts = 0;       // blocks_by_start lookups
  std::uint64_t ends_registered = 0;      // winning end insertions
  std::uint64_t end_losses = 0;
  std::uint64_t functions_created = 0;    // winning function insertions
  std::uint64_t function_attempts = 0;
  std::uint64_t splits = 0;               // split steps
  std::uint64_t split_chains = 0;         // losers that entered a split chain
  std::uint64_t split_max_depth = 0;
  std::uint64_t split_nonmonotone = 0;    // steps whose end did not decrease
  std::uint64_t cfis_decoded = 0;
  std::uint64_t targets_processed = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t waiters_registered = 0;
  std::uint64_t waiters_drained = 0;
  std::uint64_t waiter_peak = 0;
  std::uint64_t waiters_at_first_quiescence = 0;
  std::uint64_t already_set = 0;
  std::uint64_t table_growths = 0;        // analyses that grew an effective bound
  std::uint64_t quiescence_rounds = 0;
};

/// A block as seen by the engine. `start` never changes; `end` shrinks when
/// the block is split and is only written under the end entry it is moving
/// out of.
struct PBlock {
  Address start = 0;
  std::atomic<Address> end{0};
  std::optional<Instruction> terminator;

  PBlock(Address s, Address e, std::optional<Instruction> t)
      : start(s), end(e), terminator(t) {}
};

struct OutEdge {
  Address target;
  EdgeKind kind;
  bool operator==(const OutEdge&) const = default;
};

struct FnState;

/// Shared state of one parallel construction.
///
/// Lock discipline: an end entry is never held while acquiring another end
/// entry. Start map, function mutexes, the incoming index and the table
/// registry are leaves: nothing else is acquired while holding them.
class ConcurrentCfgState {
 public:
  explicit ConcurrentCfgState(const Image& image);
  ~ConcurrentCfgState();
  ConcurrentCfgState(const ConcurrentCfgState&) = delete;
  ConcurrentCfgState& operator=(const ConcurrentCfgState&) = delete;

  const Image& image() const { return image_; }

  /// Single winner per start address over the whole run.
  bool attempt_create_block(Address start);

  /// Allocates a block owned by the state.
  PBlock* new_block(Address start, Address end, std::optional<Instruction> t);

  struct Registration {
    bool winner = false;          // this call created the end's edges
    Address end = 0;              // end the block was parsed to
    std::vector<OutEdge> edges;   // edges created by the winner
  };

  /// Registers `b` at its end. The winner creates the terminator's direct
  /// edges; a loser runs the split chain until its block is registered.
  Registration register_block_end(PBlock* b);

  /// Eager split of `b` against whatever is registered at `end`, repeated
  /// at each smaller end until some end is free. Returns the ends visited.
  std::vector<Address> split_chain(PBlock* b, Address end);

  /// Single winner per entry address. The winner's function is scheduled.
  bool attempt_create_function(Address entry, bool seed = false,
                               std::optional<std::string> name = {},
                               ReturnStatus status = ReturnStatus::Unset);

  ReturnStatus status(Address entry) const;

  /// UNSET -> status exactly once; drains the waiters and, on RETURN, gives
  /// each waiting call site its fall-through edge. Throws AlreadySet.
  void update_return_status(Address entry, ReturnStatus s);

  /// Records that `caller` needs the fall-through of the call ending at
  /// `call_end`. If the callee is already resolved the edge (or nothing) is
  /// produced right away. Returns true if a waiter was queued.
  bool await_callee(Address caller, Address call_end, Address callee);

  /// Queues `target` on the function's worklist and schedules the function.
  void push_work(Address fn, Address target);

  /// Appends an edge at an end entry (and the incoming index) if absent.
  bool append_edge(Address end, OutEdge e);

  /// Table hints computed over the live graph.
  std::vector<std::uint16_t> live_predecessor_hints(Address start) const;

  std::size_t pending_waiters() const;

  /// Snapshot as a Cfg; only valid while no task is running.
  Cfg export_graph() const;

  EngineCounters counters() const;

  TableRegistry& tables() { return tables_; }

  // Scheduling hook: called when a function goes from idle to scheduled.
  std::function<void(FnState*)> schedule;

  /// Drains the function's worklist, refreshing its tables at the end.
  void run_function(FnState* fn);

  FnState* function(Address entry) const;
  std::vector<FnState*> functions_sorted() const;

  /// Quiescent passes shared by both scheduling modes.
  bool refresh_all_tables(const Cfg& snapshot);
  bool resolve_returns(const Cfg& snapshot);
  bool resolve_cycles();
  void note_first_quiescence();

  struct Counters;

 private:
  struct EndEntry {
    PBlock* block = nullptr;
    std::vector<OutEdge> out;
  };
  using EndMap = tbb::concurrent_hash_map<Address, EndEntry>;

  void visit(FnState* fn, Address t);
  void process_call(FnState* fn, Address call_end, Address target);
  bool refresh_table(FnState* owner, Address end);
  bool try_set_return(FnState* fn);
  void set_status_locked(FnState* fn, ReturnStatus s,
                         std::unique_lock<std::mutex>& lock);
  std::vector<OutEdge> create_edges(const PBlock& b, Address end);
  void add_incoming(Address target, Address src_end, EdgeKind k);
  std::optional<Address> start_of_block_ending(Address end) const;
  Address live_chain_start(Address start) const;

  const Image& image_;
  tbb::concurrent_hash_map<Address, char> starts_;
  EndMap ends_;
  tbb::concurrent_hash_map<Address, std::vector<std::pair<Address, EdgeKind>>>
      incoming_;
  tbb::concurrent_hash_map<Address, FnState*> functions_;
  tbb::concurrent_vector<std::unique_ptr<PBlock>> block_store_;
  tbb::concurrent_vector<std::unique_ptr<FnState>> fn_store_;
  std::map<Address, FnState*> ijmp_owner_;  // quiescent reads only
  std::mutex ijmp_owner_mu_;
  tbb::enumerable_thread_specific<std::unordered_set<Address>> tl_cache_;
  TableRegistry tables_;
  std::unique_ptr<Counters> c_;
};

struct StageTimes {
  double init_ms = 0;
  double traversal_ms = 0;
  double finalization_ms = 0;
};

struct EngineResult {
  Cfg graph;
  TableRegistry tables;
  EngineCounters counters;
  FinalizeStats finalize_stats;
  StageTimes times;
};

EngineResult construct_full(const Image& image, EngineOptions opts);

/// Finalized graph; equals serial_construct(image) for every worker count.
Cfg construct(const Image& image, unsigned workers);

}  // namespace pcfg
