#include "pcfg/export.hpp"

#include <sstream>

#include <json.hpp>

namespace pcfg {

std::string to_dot(const Cfg& g) {
  std::ostringstream os;
  os << "digraph cfg {\n  node [shape=box];\n";
  for (const auto& [s, b] : g.blocks()) {
    os << "  \"" << hex(b.start) << "\" [label=\"" << hex(b.start) << "-"
       << hex(b.end);
    if (const auto* f = g.entry(b.start))
      os << "\\n" << (f->name ? *f->name : "entry") << " "
         << to_string(f->status);
    os << "\"";
    if (g.entry(b.start)) os << ", peripheries=2";
    os << "];\n";
  }
  for (Address c : g.candidates())
    os << "  \"" << hex(c) << "\" [style=dashed];\n";
  for (const auto& e : g.edges())
    os << "  \"" << hex(e.source) << "\" -> \"" << hex(e.target)
       << "\" [label=\"" << to_string(e.kind) << "\"];\n";
  os << "}\n";
  return os.str();
}

std::string to_json(const Cfg& g, const TableRegistry& tables) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["blocks"] = ordered_json::array();
  for (const auto& [s, b] : g.blocks())
    j["blocks"].push_back({{"start", hex(b.start)}, {"end", hex(b.end)}});
  j["candidates"] = ordered_json::array();
  for (Address c : g.candidates()) j["candidates"].push_back(hex(c));
  j["edges"] = ordered_json::array();
  for (const auto& e : g.edges())
    j["edges"].push_back({{"src", hex(e.source)},
                          {"dst", hex(e.target)},
                          {"kind", to_string(e.kind)}});
  j["entries"] = ordered_json::array();
  for (const auto& [a, f] : g.entries()) {
    ordered_json r{{"entry", hex(a)},
                   {"status", to_string(f.status)},
                   {"seed", f.seed}};
    if (f.name) r["name"] = *f.name;
    j["entries"].push_back(r);
  }
  j["jump_tables"] = ordered_json::array();
  for (const auto& d : tables.sorted())
    j["jump_tables"].push_back({{"base", hex(d.base)},
                                {"declared_bound", d.declared_bound},
                                {"effective_bound", d.effective_bound},
                                {"final_bound", d.final_bound}});
  return j.dump(1) + "\n";
}

}  // namespace pcfg
