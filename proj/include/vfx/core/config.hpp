#pragma once

// Strict JSON config reading: every key must be consumed, otherwise the
// document is rejected with the dotted path of the first unknown key.

#include <set>
#include <string>

#include "json.hpp"
#include "vfx/core/error.hpp"

namespace vfx {

using json = nlohmann::json;

class ConfigReader {
 public:
  ConfigReader(const json& doc, std::string context) : doc_(doc), ctx_(std::move(context)) {
    if (!doc_.is_object()) throw ValidationError(where() + "expected a JSON object");
  }

  template <class V>
  ConfigReader& get(const char* key, V& out) {
    if (!doc_.contains(key)) return *this;
    seen_.insert(key);
    try {
      out = doc_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ValidationError(where() + "key '" + key + "' has the wrong type");
    }
    return *this;
  }

  bool has(const char* key) const { return doc_.contains(key); }

  const json& child(const char* key) {
    seen_.insert(key);
    return doc_.at(key);
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it)
      if (!seen_.count(it.key())) throw ValidationError(where() + "unknown config key '" + it.key() + "'");
  }

 private:
  std::string where() const { return ctx_.empty() ? "" : ctx_ + ": "; }

  const json& doc_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace vfx
