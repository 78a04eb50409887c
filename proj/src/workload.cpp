#include "pcfg/workload.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pcfg/finalization.hpp"

namespace pcfg {

namespace {

constexpr Address kTextBase = 0x1000;

// Minimal two-pass assembler: text addresses are known as code is emitted,
// forward branch targets and table bases are patched at link time.
class Assembler {
 public:
  Address here() const { return kTextBase + text_.size(); }

  void label(const std::string& name) { labels_[name] = here(); }
  Address at(const std::string& name) const { return labels_.at(name); }

  void op(InstrKind k) { encode(Instruction::make(k), text_); }
  void alu(std::uint16_t imm) {
    auto i = Instruction::make(InstrKind::Alu);
    i.imm = imm;
    encode(i, text_);
  }
  void hint(std::uint16_t v) { encode(Instruction::bound_hint(v), text_); }
  void branch(InstrKind k, const std::string& target) {
    fixups_.push_back({text_.size() + 1, target});
    encode(Instruction::branch(k, 0), text_);
  }
  void ijmp(const std::string& table, std::uint16_t bound) {
    table_fixups_.push_back({text_.size() + 1, table});
    encode(Instruction::ijmp_table(0, bound), text_);
  }
  void table(const std::string& name, std::vector<std::string> targets) {
    tables_[name] = data_words_.size() * 4;
    for (auto& t : targets) data_words_.push_back(std::move(t));
  }
  void symbol(const std::string& label) {
    symbols_.push_back(SymbolEntry::make(at(label), label));
  }

  Address data_base() const {
    return ((here() + 0xfff) & ~Address{0xfff}) + 0x1000;
  }
  Address table_at(const std::string& name) const {
    return data_base() + tables_.at(name);
  }

  Image link() {
    auto put32 = [](std::vector<std::uint8_t>& v, std::size_t off,
                    Address x) {
      for (int i = 0; i < 4; ++i) v[off + i] = (x >> (8 * i)) & 0xff;
    };
    for (const auto& [off, l] : fixups_) put32(text_, off, at(l));
    for (const auto& [off, t] : table_fixups_) put32(text_, off, table_at(t));
    std::vector<std::uint8_t> data(data_words_.size() * 4);
    for (std::size_t i = 0; i < data_words_.size(); ++i)
      put32(data, 4 * i, at(data_words_[i]));
    return Image(kTextBase, text_, data_base(), std::move(data), symbols_);
  }

 private:
  std::vector<std::uint8_t> text_;
  std::map<std::string, Address> labels_;
  std::map<std::string, std::size_t> tables_;
  std::vector<std::pair<std::size_t, std::string>> fixups_, table_fixups_;
  std::vector<std::string> data_words_;
  std::vector<SymbolEntry> symbols_;
};

// Emits one instance of a family under a label prefix and records its truth.
class Emitter {
 public:
  Emitter(Assembler& a, std::mt19937_64& rng) : a_(a), rng_(rng) {}

  std::uint64_t pick(std::uint64_t lo, std::uint64_t hi) {
    return lo + rng_() % (hi - lo + 1);
  }

  void shared_code(const std::string& p, unsigned k) {
    main_calling(p, names(p + "f", k));
    for (unsigned i = 0; i < k; ++i) {
      auto f = p + "f" + std::to_string(i);
      begin(f);
      alu();
      a_.branch(InstrKind::JmpDirect, p + "s" + std::to_string(i));
      range(f, a_.at(f), a_.here());
    }
    for (unsigned i = 0; i < k; ++i) {
      a_.label(p + "s" + std::to_string(i));
      alu();
    }
    a_.op(InstrKind::Ret);
    for (unsigned i = 0; i < k; ++i)
      range(p + "f" + std::to_string(i), a_.at(p + "s" + std::to_string(i)),
            a_.here());
  }

  void noreturn_chain(const std::string& p, unsigned depth, bool early_ret) {
    auto chain = names(p + "c", depth + 1);
    chain[0] = p + "main";
    for (unsigned i = 0; i < depth; ++i) {
      begin(chain[i]);
      a_.branch(InstrKind::Call, chain[i + 1]);
      Address call_end = a_.here();
      alu();
      a_.op(InstrKind::Ret);
      if (early_ret) {
        range(chain[i], a_.at(chain[i]), a_.here());
      } else {
        range(chain[i], a_.at(chain[i]), call_end);
        truth.noreturn_call_sites.insert(call_end);
      }
    }
    auto& last = chain[depth];
    begin(last);
    if (early_ret) {
      a_.branch(InstrKind::JccDirect, last + "_ret");
      a_.op(InstrKind::Halt);
      a_.label(last + "_ret");
      a_.op(InstrKind::Ret);
    } else {
      alu();
      a_.op(InstrKind::Halt);
    }
    range(last, a_.at(last), a_.here());
  }

  void noreturn_cycle(const std::string& p, unsigned k) {
    auto fs = names(p + "f", k);
    begin(p + "main");
    a_.branch(InstrKind::Call, fs[0]);
    truth.noreturn_call_sites.insert(a_.here());
    range(p + "main", a_.at(p + "main"), a_.here());
    alu();
    a_.op(InstrKind::Ret);
    for (unsigned i = 0; i < k; ++i) {
      begin(fs[i]);
      a_.branch(InstrKind::Call, fs[(i + 1) % k]);
      truth.noreturn_call_sites.insert(a_.here());
      range(fs[i], a_.at(fs[i]), a_.here());
      a_.op(InstrKind::Ret);
    }
  }

  // Listing-1 shape: A tears down its frame and branches to T, B branches to
  // T without a teardown. T has no symbol.
  void tailcall_ambiguous(const std::string& p, bool target_called) {
    std::vector<std::string> callees{p + "A", p + "B"};
    if (target_called) callees.push_back(p + "T");
    main_calling(p, callees);
    std::vector<Address> branches;
    for (const char* who : {"A", "B"}) {
      auto f = p + who;
      begin(f);
      alu();
      if (*who == 'A') a_.op(InstrKind::FrameTeardown);
      branches.push_back(a_.here());
      a_.branch(InstrKind::JmpDirect, p + "T");
      range(f, a_.at(f), a_.here());
    }
    a_.label(p + "T");
    pad();
    alu();
    a_.op(InstrKind::Ret);
    range(p + "T", a_.at(p + "T"), a_.here());
    for (Address src : branches) truth.tailcall_edges.insert({src, a_.at(p + "T")});
  }

  // A switch: BoundHint, range check, table jump, n cases and a default
  // that all join at one return.
  void switch_fn(const std::string& f, unsigned n, std::uint16_t declared,
                 bool with_hint) {
    begin(f);
    if (with_hint) a_.hint(static_cast<std::uint16_t>(n));
    a_.branch(InstrKind::JccDirect, f + "_def");
    a_.ijmp(f + "_tbl", declared);
    std::vector<std::string> cases;
    for (unsigned i = 0; i < n; ++i) {
      cases.push_back(f + "_c" + std::to_string(i));
      a_.label(cases.back());
      alu();
      a_.branch(InstrKind::JmpDirect, f + "_join");
    }
    a_.label(f + "_def");
    alu();
    a_.branch(InstrKind::JmpDirect, f + "_join");
    a_.label(f + "_join");
    a_.op(InstrKind::Ret);
    range(f, a_.at(f), a_.here());
    a_.table(f + "_tbl", cases);
    tables_.push_back({f + "_tbl", n});
  }

  void jump_table(const std::string& p, unsigned n) {
    main_calling(p, {p + "sw"});
    switch_fn(p + "sw", n, static_cast<std::uint16_t>(n), true);
  }

  void jump_table_overapprox(const std::string& p, unsigned extra) {
    main_calling(p, {p + "s1", p + "s2"});
    unsigned n1 = 3, n2 = std::max(3u, extra);
    switch_fn(p + "s1", n1, static_cast<std::uint16_t>(n1 + extra), false);
    switch_fn(p + "s2", n2, static_cast<std::uint16_t>(n2), false);
  }

  void multi_entry(const std::string& p, unsigned alts) {
    std::vector<std::string> fs{p + "f"};
    for (unsigned i = 1; i <= alts; ++i)
      fs.push_back(p + "f_alt" + std::to_string(i));
    main_calling(p, fs);
    begin(fs[0]);
    alu();
    for (unsigned i = 1; i <= alts; ++i) {
      a_.label(fs[i]);
      a_.symbol(fs[i]);
      alu();
    }
    a_.op(InstrKind::Ret);
    for (const auto& f : fs) range(f, a_.at(f), a_.here());
  }

  // The cold part sits after an unrelated function and is reached by a
  // teardown-and-branch from its only user.
  void outlined_cold(const std::string& p) {
    main_calling(p, {p + "f", p + "g"});
    auto f = p + "f";
    begin(f);
    alu();
    a_.branch(InstrKind::JccDirect, f + "_hot");
    a_.op(InstrKind::FrameTeardown);
    a_.branch(InstrKind::JmpDirect, f + "_cold");
    a_.label(f + "_hot");
    alu();
    a_.op(InstrKind::Ret);
    range(f, a_.at(f), a_.here());
    begin(p + "g");
    alu();
    a_.op(InstrKind::Ret);
    range(p + "g", a_.at(p + "g"), a_.here());
    a_.label(f + "_cold");
    alu();
    a_.op(InstrKind::Halt);
    range(f, a_.at(f + "_cold"), a_.here());
  }

  void opaque_jump(const std::string& p) {
    main_calling(p, {p + "f"});
    auto f = p + "f";
    begin(f);
    alu();
    a_.branch(InstrKind::JccDirect, f + "_ret");
    a_.op(InstrKind::IJmpOpaque);
    a_.label(f + "_ret");
    a_.op(InstrKind::Ret);
    range(f, a_.at(f), a_.here());
  }

  // Table and label addresses are final only once all code is emitted.
  void finish() {
    for (const auto& [name, n] : tables_)
      truth.jump_table_sizes[a_.table_at(name)] = n;
    for (auto& [label, rs] : raw_ranges_)
      truth.function_ranges[a_.at(label)] = merge_ranges(rs);
  }

  std::size_t functions() const { return raw_ranges_.size(); }

  GroundTruth truth;

 private:
  static std::vector<std::string> names(const std::string& stem, unsigned n) {
    std::vector<std::string> out;
    for (unsigned i = 0; i < n; ++i) out.push_back(stem + std::to_string(i));
    return out;
  }

  void alu() { a_.alu(static_cast<std::uint16_t>(rng_() & 0xffff)); }
  void pad() {
    for (auto n = pick(0, 2); n > 0; --n) alu();
  }
  void begin(const std::string& f) {
    a_.label(f);
    a_.symbol(f);
    pad();
  }
  void range(const std::string& f, Address lo, Address hi) {
    raw_ranges_[f].emplace_back(lo, hi);
  }
  void main_calling(const std::string& p,
                    const std::vector<std::string>& callees) {
    auto m = p + "main";
    begin(m);
    for (const auto& c : callees) a_.branch(InstrKind::Call, c);
    a_.op(InstrKind::Ret);
    range(m, a_.at(m), a_.here());
  }

  Assembler& a_;
  std::mt19937_64& rng_;
  std::map<std::string, std::vector<Range>> raw_ranges_;
  std::vector<std::pair<std::string, unsigned>> tables_;
};

std::uint64_t param(const ScenarioSpec& spec, const std::string& name) {
  for (const auto& p : family_params(spec.family))
    if (p.name == name) {
      auto it = spec.params.find(name);
      return it == spec.params.end() ? p.def : it->second;
    }
  throw SpecOutOfBounds("no parameter " + name);
}

void emit_unit(Emitter& em, Family f, const std::string& p,
               const ScenarioSpec& spec) {
  auto u = [&](const char* n) { return static_cast<unsigned>(param(spec, n)); };
  switch (f) {
    case Family::SharedCode: em.shared_code(p, u("sharers")); break;
    case Family::NoreturnChain:
      em.noreturn_chain(p, u("depth"), u("early_ret") != 0);
      break;
    case Family::NoreturnCycle: em.noreturn_cycle(p, u("k")); break;
    case Family::TailcallAmbiguous:
      em.tailcall_ambiguous(p, u("target_called") != 0);
      break;
    case Family::JumpTable: em.jump_table(p, u("entries")); break;
    case Family::JumpTableOverapprox:
      em.jump_table_overapprox(p, u("extra"));
      break;
    case Family::MultiEntry: em.multi_entry(p, u("alts")); break;
    case Family::OutlinedCold: em.outlined_cold(p); break;
    case Family::OpaqueJump: em.opaque_jump(p); break;
    case Family::BigRandom: break;
  }
}

void big_random(Emitter& em, std::uint64_t functions) {
  for (unsigned unit = 0; em.functions() < functions; ++unit) {
    auto p = "u" + std::to_string(unit) + "_";
    switch (em.pick(0, 8)) {
      case 0: em.shared_code(p, em.pick(2, 4)); break;
      case 1: em.noreturn_chain(p, em.pick(1, 4), em.pick(0, 1)); break;
      case 2: em.noreturn_cycle(p, em.pick(1, 3)); break;
      case 3: em.tailcall_ambiguous(p, em.pick(0, 1)); break;
      case 4: em.jump_table(p, em.pick(1, 8)); break;
      case 5: em.jump_table_overapprox(p, em.pick(1, 3)); break;
      case 6: em.multi_entry(p, em.pick(1, 2)); break;
      case 7: em.outlined_cold(p); break;
      default: em.opaque_jump(p); break;
    }
  }
}

const std::map<Family, const char*>& family_names() {
  static const std::map<Family, const char*> m{
      {Family::SharedCode, "shared-code"},
      {Family::NoreturnChain, "noreturn-chain"},
      {Family::NoreturnCycle, "noreturn-cycle"},
      {Family::TailcallAmbiguous, "tailcall-ambiguous"},
      {Family::JumpTable, "jump-table"},
      {Family::JumpTableOverapprox, "jump-table-overapprox"},
      {Family::MultiEntry, "multi-entry"},
      {Family::OutlinedCold, "outlined-cold"},
      {Family::OpaqueJump, "opaque-jump"},
      {Family::BigRandom, "big-random"},
  };
  return m;
}

}  // namespace

const char* to_string(Family f) { return family_names().at(f); }

Family parse_family(const std::string& name) {
  for (const auto& [f, n] : family_names())
    if (name == n) return f;
  throw SpecOutOfBounds("unknown family: " + name);
}

std::vector<Family> all_families() {
  std::vector<Family> out;
  for (const auto& [f, n] : family_names()) out.push_back(f);
  return out;
}

std::vector<ParamInfo> family_params(Family f) {
  switch (f) {
    case Family::SharedCode: return {{"sharers", 4, 2, 64}};
    case Family::NoreturnChain:
      return {{"depth", 3, 1, 64}, {"early_ret", 0, 0, 1}};
    case Family::NoreturnCycle: return {{"k", 3, 1, 64}};
    case Family::TailcallAmbiguous: return {{"target_called", 1, 0, 1}};
    case Family::JumpTable: return {{"entries", 4, 1, 256}};
    case Family::JumpTableOverapprox: return {{"extra", 2, 1, 64}};
    case Family::MultiEntry: return {{"alts", 1, 1, 15}};
    case Family::BigRandom: return {{"functions", 1000, 1, 100000}};
    default: return {};
  }
}

Scenario generate(const ScenarioSpec& spec) {
  auto known = family_params(spec.family);
  for (const auto& [name, v] : spec.params) {
    auto it = std::find_if(known.begin(), known.end(),
                           [&](const ParamInfo& p) { return p.name == name; });
    if (it == known.end())
      throw SpecOutOfBounds(std::string(to_string(spec.family)) +
                            " has no parameter " + name);
    if (v < it->lo || v > it->hi)
      throw SpecOutOfBounds(name + "=" + std::to_string(v) + " outside [" +
                            std::to_string(it->lo) + ", " +
                            std::to_string(it->hi) + "]");
  }

  Assembler a;
  std::mt19937_64 rng(spec.seed);
  Emitter em(a, rng);
  if (spec.family == Family::BigRandom)
    big_random(em, param(spec, "functions"));
  else
    emit_unit(em, spec.family, "", spec);
  Scenario s{a.link(), {}};
  em.finish();
  s.truth = std::move(em.truth);
  return s;
}

std::string truth_to_json(const GroundTruth& t) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["functions"] = ordered_json::array();
  for (const auto& [entry, rs] : t.function_ranges) {
    ordered_json ranges = ordered_json::array();
    for (auto [lo, hi] : rs) ranges.push_back({hex(lo), hex(hi)});
    j["functions"].push_back({{"entry", hex(entry)}, {"ranges", ranges}});
  }
  j["jump_tables"] = ordered_json::array();
  for (auto [base, n] : t.jump_table_sizes)
    j["jump_tables"].push_back({{"base", hex(base)}, {"size", n}});
  j["noreturn_calls"] = ordered_json::array();
  for (Address a : t.noreturn_call_sites) j["noreturn_calls"].push_back(hex(a));
  j["tail_calls"] = ordered_json::array();
  for (auto [s, d] : t.tailcall_edges)
    j["tail_calls"].push_back({hex(s), hex(d)});
  return j.dump(1) + "\n";
}

namespace {

Address parse_hex(const nlohmann::json& v) {
  const auto& s = v.get_ref<const std::string&>();
  if (s.size() < 3 || s[0] != '0' || s[1] != 'x')
    throw Error("truth: bad address " + s);
  std::size_t used = 0;
  Address a = std::stoull(s.substr(2), &used, 16);
  if (used != s.size() - 2) throw Error("truth: bad address " + s);
  return a;
}

}  // namespace

GroundTruth truth_from_json(const std::string& text) {
  GroundTruth t;
  try {
    auto j = nlohmann::json::parse(text);
    for (const auto& f : j.at("functions")) {
      auto& rs = t.function_ranges[parse_hex(f.at("entry"))];
      for (const auto& r : f.at("ranges")) {
        if (r.size() != 2) throw Error("truth: range needs two bounds");
        rs.emplace_back(parse_hex(r[0]), parse_hex(r[1]));
      }
    }
    for (const auto& tb : j.at("jump_tables")) {
      auto n = tb.at("size").get<std::uint32_t>();
      if (n < 1) throw Error("truth: table size must be >= 1");
      t.jump_table_sizes[parse_hex(tb.at("base"))] = n;
    }
    for (const auto& a : j.at("noreturn_calls"))
      t.noreturn_call_sites.insert(parse_hex(a));
    for (const auto& e : j.at("tail_calls")) {
      if (e.size() != 2) throw Error("truth: tail call needs two addresses");
      t.tailcall_edges.insert({parse_hex(e[0]), parse_hex(e[1])});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("truth: ") + e.what());
  } catch (const std::logic_error& e) {
    throw Error(std::string("truth: ") + e.what());
  }
  return t;
}

GroundTruth read_truth_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return truth_from_json(ss.str());
}

void emit(const Image& image, const GroundTruth& truth,
          const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_image_file(image, dir / "image.pcfg");
  std::ofstream out(dir / "truth.json");
  out << truth_to_json(truth);
  if (!out) throw IoError("cannot write " + (dir / "truth.json").string());
}

GroundTruth observe(const Cfg& g, const TableRegistry& tables) {
  GroundTruth t;
  for (const auto& fb : assign_function_boundaries(g)) {
    std::vector<Range> rs;
    for (Address s : fb.blocks) {
      const Block* b = g.block_at(s);
      rs.emplace_back(b->start, b->end);
    }
    t.function_ranges[fb.entry] = merge_ranges(std::move(rs));
  }
  for (const auto& d : tables.sorted()) t.jump_table_sizes[d.base] = d.final_bound;
  for (const auto& [s, b] : g.blocks()) {
    if (!b.terminator || b.terminator->kind != InstrKind::Call) continue;
    bool returns = false, calls = false;
    for (const auto& e : g.out_edges(s)) {
      returns = returns || e.kind == EdgeKind::CallFallthrough;
      calls = calls || e.kind == EdgeKind::Call;
    }
    if (calls && !returns) t.noreturn_call_sites.insert(b.end);
  }
  for (const auto& e : g.edges())
    if (e.kind == EdgeKind::TailCall)
      t.tailcall_edges.insert({g.block_at(e.source)->terminator->addr, e.target});
  return t;
}

namespace {

std::string range_list(const std::vector<Range>& rs) {
  std::string s;
  for (auto [lo, hi] : rs) {
    if (!s.empty()) s += ' ';
    s += "[" + hex(lo) + "," + hex(hi) + ")";
  }
  return s.empty() ? "(none)" : s;
}

template <class Map, class Show>
void diff_maps(const Map& exp, const Map& act, Show show,
               std::vector<std::string>& out) {
  for (const auto& [k, v] : exp) {
    auto it = act.find(k);
    if (it == act.end())
      out.push_back(hex(k) + ": missing (expected " + show(v) + ")");
    else if (it->second != v)
      out.push_back(hex(k) + ": expected " + show(v) + ", got " +
                    show(it->second));
  }
  for (const auto& [k, v] : act)
    if (!exp.contains(k))
      out.push_back(hex(k) + ": unexpected (" + show(v) + ")");
}

template <class Set, class Show>
void diff_sets(const Set& exp, const Set& act, Show show,
               std::vector<std::string>& out) {
  for (const auto& x : exp)
    if (!act.contains(x)) out.push_back(show(x) + ": missing");
  for (const auto& x : act)
    if (!exp.contains(x)) out.push_back(show(x) + ": unexpected");
}

}  // namespace

std::vector<FacetReport> compare(const GroundTruth& exp,
                                 const GroundTruth& act) {
  std::vector<FacetReport> out(4);
  out[0].facet = "function ranges";
  diff_maps(exp.function_ranges, act.function_ranges, range_list, out[0].diffs);
  out[1].facet = "jump table sizes";
  diff_maps(exp.jump_table_sizes, act.jump_table_sizes,
            [](std::uint32_t n) { return std::to_string(n); }, out[1].diffs);
  out[2].facet = "noreturn call sites";
  diff_sets(exp.noreturn_call_sites, act.noreturn_call_sites,
            [](Address a) { return hex(a); }, out[2].diffs);
  out[3].facet = "tail-call edges";
  diff_sets(exp.tailcall_edges, act.tailcall_edges,
            [](const std::pair<Address, Address>& e) {
              return hex(e.first) + "->" + hex(e.second);
            },
            out[3].diffs);
  return out;
}

}  // namespace pcfg
