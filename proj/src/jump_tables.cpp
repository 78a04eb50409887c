#include "pcfg/jump_tables.hpp"

#include <algorithm>

namespace pcfg {

std::vector<Address> read_table(const Image& image, Address base,
                                std::uint32_t lo, std::uint32_t hi,
                                bool* clamped) {
  std::vector<Address> out;
  for (std::uint32_t i = lo; i < hi; ++i) {
    auto v = image.read_data_u32(base + 4ull * i);
    if (!v) {
      if (clamped) *clamped = true;
      break;
    }
    if (image.in_text(*v)) out.push_back(*v);
  }
  return out;
}

TableAnalysis resolve_table(const Image& image, Address base,
                            std::uint16_t declared,
                            std::span<const std::uint16_t> hints) {
  TableAnalysis r;
  r.effective_bound = declared;
  for (auto h : hints) r.effective_bound = std::max<std::uint32_t>(r.effective_bound, h);
  r.targets = read_table(image, base, 0, r.effective_bound, &r.clamped);
  std::sort(r.targets.begin(), r.targets.end());
  r.targets.erase(std::unique(r.targets.begin(), r.targets.end()),
                  r.targets.end());
  return r;
}

namespace {

std::optional<Address> fallthrough_pred(const Cfg& g, Address start) {
  for (const auto& e : g.in_edges(start))
    if (e.kind == EdgeKind::Fallthrough) return e.source;
  return std::nullopt;
}

bool is_direct_pred(EdgeKind k) {
  return k == EdgeKind::Direct || k == EdgeKind::CondTaken ||
         k == EdgeKind::CondFallthrough || k == EdgeKind::CallFallthrough;
}

}  // namespace

Address chain_start(const Cfg& g, Address start) {
  Address cur = start;
  while (auto p = fallthrough_pred(g, cur)) {
    if (*p >= cur) break;
    cur = *p;
  }
  return cur;
}

std::vector<std::uint16_t> predecessor_hints(const Cfg& g, const Image& image,
                                             Address start) {
  std::vector<std::uint16_t> hints;
  Address cur = start;
  while (true) {
    for (const auto& e : g.in_edges(cur)) {
      if (!is_direct_pred(e.kind)) continue;
      const Block* src = g.block_at(e.source);
      if (!src) continue;
      if (auto h = last_bound_hint(image, chain_start(g, src->start), src->end))
        hints.push_back(*h);
    }
    auto p = fallthrough_pred(g, cur);
    if (!p || *p >= cur) break;
    cur = *p;
  }
  return hints;
}

TableAnalysis analyze_ijmp(const Cfg& g, const Image& image, Address start) {
  const Block* b = g.block_at(start);
  if (!b || !b->terminator || b->terminator->kind != InstrKind::IJmpTable)
    throw NotIndirectTerminator(start);
  auto hints = predecessor_hints(g, image, start);
  return resolve_table(image, b->terminator->table_base, b->terminator->imm,
                       hints);
}

TableRegistry::TableRegistry(const TableRegistry& o) {
  for (const auto& d : o.sorted()) map_.insert({d.base, d});
}

TableRegistry& TableRegistry::operator=(const TableRegistry& o) {
  if (this != &o) {
    map_.clear();
    for (const auto& d : o.sorted()) map_.insert({d.base, d});
  }
  return *this;
}

bool TableRegistry::record(Address base, std::uint32_t declared,
                           std::uint32_t effective, Address owner_end,
                           bool clamped) {
  decltype(map_)::accessor acc;
  if (map_.insert(acc, base)) {
    acc->second = TableDescriptor{base,      declared,  effective, effective,
                                  0,         owner_end, clamped};
    return true;
  }
  auto& d = acc->second;
  // Two jumps through one table: keep the lower owner so the result does not
  // depend on which one was analyzed first.
  if (owner_end < d.owner_end) {
    d.owner_end = owner_end;
    d.declared_bound = declared;
  }
  d.clamped = d.clamped || clamped;
  if (effective <= d.effective_bound) return false;
  d.effective_bound = effective;
  d.final_bound = effective;
  return true;
}

std::optional<TableDescriptor> TableRegistry::find(Address base) const {
  decltype(map_)::const_accessor acc;
  if (!map_.find(acc, base)) return std::nullopt;
  return acc->second;
}

void TableRegistry::set_final_bound(Address base, std::uint32_t bound) {
  decltype(map_)::accessor acc;
  if (map_.find(acc, base)) acc->second.final_bound = bound;
}

void TableRegistry::set_owner_block(Address base, Address start) {
  decltype(map_)::accessor acc;
  if (map_.find(acc, base)) acc->second.owner_block = start;
}

std::vector<TableDescriptor> TableRegistry::sorted() const {
  std::vector<TableDescriptor> out;
  out.reserve(map_.size());
  for (const auto& [base, d] : map_) out.push_back(d);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.base < b.base; });
  return out;
}

}  // namespace pcfg
