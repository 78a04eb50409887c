#include "pcfg/symtab.hpp"

#include <algorithm>
#include <functional>

namespace pcfg {

namespace {

bool by_identity(const SymbolEntry& a, const SymbolEntry& b) {
  return std::tie(a.offset, a.mangled) < std::tie(b.offset, b.mangled);
}

template <typename K>
void append(tbb::concurrent_hash_map<K, std::vector<SymbolEntry>>& idx,
            const K& key, const SymbolEntry& s) {
  typename tbb::concurrent_hash_map<K, std::vector<SymbolEntry>>::accessor acc;
  idx.insert(acc, key);
  acc->second.push_back(s);
}

}  // namespace

std::size_t IndexedSymbols::IdentityHash::hash(const Identity& k) {
  std::size_t h = std::hash<std::string>{}(k.second);
  return h ^ (std::hash<Address>{}(k.first) + 0x9e3779b97f4a7c15ull + (h << 6) +
              (h >> 2));
}

bool IndexedSymbols::insert(const SymbolEntry& s) {
  if (sealed()) throw PhaseViolation("insert into sealed symbol table");
  decltype(master_)::accessor acc;
  if (!master_.insert(acc, Identity{s.offset, s.mangled})) return false;
  acc->second = s;
  // Still holding the master entry: the index writes for this symbol are
  // totally ordered with respect to any other insert of it.
  append(by_offset_, s.offset, s);
  append(by_mangled_, s.mangled, s);
  append(by_pretty_, s.pretty, s);
  append(by_typed_, s.typed, s);
  return true;
}

void IndexedSymbols::require_read_phase() const {
  if (!sealed()) throw PhaseViolation("lookup before the symbol table is sealed");
}

template <typename K>
std::vector<SymbolEntry> IndexedSymbols::lookup(const Index<K>& idx,
                                                const K& key) {
  typename Index<K>::const_accessor acc;
  if (!idx.find(acc, key)) return {};
  auto out = acc->second;
  std::sort(out.begin(), out.end(), by_identity);
  return out;
}

std::vector<SymbolEntry> IndexedSymbols::lookup_by_offset(Address offset) const {
  require_read_phase();
  return lookup(by_offset_, offset);
}

std::vector<SymbolEntry> IndexedSymbols::lookup_by_mangled(
    const std::string& name) const {
  require_read_phase();
  return lookup(by_mangled_, name);
}

std::vector<SymbolEntry> IndexedSymbols::lookup_by_pretty(
    const std::string& name) const {
  require_read_phase();
  return lookup(by_pretty_, name);
}

std::vector<SymbolEntry> IndexedSymbols::lookup_by_typed(
    const std::string& name) const {
  require_read_phase();
  return lookup(by_typed_, name);
}

std::vector<SymbolEntry> IndexedSymbols::all() const {
  require_read_phase();
  std::vector<SymbolEntry> out;
  out.reserve(master_.size());
  for (const auto& [k, s] : master_) out.push_back(s);
  std::sort(out.begin(), out.end(), by_identity);
  return out;
}

IndexedSymbols::IndexSizes IndexedSymbols::index_sizes() const {
  require_read_phase();
  IndexSizes n;
  for (const auto& [k, v] : by_offset_) n.offset += v.size();
  for (const auto& [k, v] : by_mangled_) n.mangled += v.size();
  for (const auto& [k, v] : by_pretty_) n.pretty += v.size();
  for (const auto& [k, v] : by_typed_) n.typed += v.size();
  return n;
}

}  // namespace pcfg
