#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pcfg/cfg.hpp"
#include "pcfg/image.hpp"
#include "pcfg/jump_tables.hpp"

namespace pcfg {

using Range = std::pair<Address, Address>;

/// What a correct analysis must recover from a generated image.
struct GroundTruth {
  std::map<Address, std::vector<Range>> function_ranges;  // merged, sorted
  std::map<Address, std::uint32_t> jump_table_sizes;
  std::set<Address> noreturn_call_sites;                   // call block ends
  std::set<std::pair<Address, Address>> tailcall_edges;    // (branch, target)

  bool operator==(const GroundTruth&) const = default;
};

enum class Family {
  SharedCode,
  NoreturnChain,
  NoreturnCycle,
  TailcallAmbiguous,
  JumpTable,
  JumpTableOverapprox,
  MultiEntry,
  OutlinedCold,
  OpaqueJump,
  BigRandom,
};

const char* to_string(Family f);
/// Throws SpecOutOfBounds on an unknown name.
Family parse_family(const std::string& name);
std::vector<Family> all_families();

/// Family plus its integer parameters. Missing parameters take defaults.
struct ScenarioSpec {
  Family family = Family::SharedCode;
  std::map<std::string, std::uint64_t> params;
  std::uint64_t seed = 0;
};

/// Names, defaults and inclusive bounds of a family's parameters.
struct ParamInfo {
  std::string name;
  std::uint64_t def, lo, hi;
};
std::vector<ParamInfo> family_params(Family f);

struct Scenario {
  Image image;
  GroundTruth truth;
};

/// Deterministic in (family, params, seed). Throws SpecOutOfBounds.
Scenario generate(const ScenarioSpec& spec);

/// Writes dir/image.pcfg and dir/truth.json.
void emit(const Image& image, const GroundTruth& truth,
          const std::filesystem::path& dir);

std::string truth_to_json(const GroundTruth& truth);
/// Throws MalformedImage-style Error on schema violations.
GroundTruth truth_from_json(const std::string& text);
GroundTruth read_truth_file(const std::filesystem::path& path);

/// The four facets as recovered by an analysis.
GroundTruth observe(const Cfg& g, const TableRegistry& tables);

struct FacetReport {
  std::string facet;
  std::vector<std::string> diffs;
  bool ok() const { return diffs.empty(); }
};

/// One report per facet, in fixed order: function ranges, jump table sizes,
/// noreturn call sites, tail-call edges.
std::vector<FacetReport> compare(const GroundTruth& expected,
                                 const GroundTruth& actual);

}  // namespace pcfg
