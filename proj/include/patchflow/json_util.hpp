#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "patchflow/util.hpp"

namespace patchflow {

// Strict object reader: every key must be known, so config typos fail loudly
// instead of silently using defaults.
inline void check_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                       const std::string& context) {
  if (!obj.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const auto& k : allowed)
      if (item.key() == k) known = true;
    if (!known) throw ConfigError(context + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
T json_get(const nlohmann::json& obj, const std::string& key, const T& fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

}  // namespace patchflow
