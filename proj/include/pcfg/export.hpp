#pragma once

#include <string>

#include "pcfg/cfg.hpp"
#include "pcfg/jump_tables.hpp"

namespace pcfg {

/// Graphviz form, records in canonical order.
std::string to_dot(const Cfg& g);

/// JSON form with the same record order plus the table registry.
std::string to_json(const Cfg& g, const TableRegistry& tables);

}  // namespace pcfg
