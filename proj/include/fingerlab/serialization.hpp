#pragma once

// JSON forms of configuration types. Unknown keys are rejected so typos in
// experiment files fail loudly; missing keys keep their defaults.

#include "json.hpp"

#include <string>
#include <string_view>

#include "fingerlab/classify.hpp"
#include "fingerlab/encoder.hpp"
#include "fingerlab/error.hpp"
#include "fingerlab/lm.hpp"
#include "fingerlab/textgen.hpp"
#include "fingerlab/trainer.hpp"

namespace fingerlab {

void to_json(nlohmann::json& j, const LMConfig& c);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const LinearOptions& o);
void from_json(const nlohmann::json& j, LinearOptions& o);
void to_json(nlohmann::json& j, const FilterOptions& o);
void from_json(const nlohmann::json& j, FilterOptions& o);
void from_json(const nlohmann::json& j, LMConfig& c);
void to_json(nlohmann::json& j, const TrainRun& r);
void from_json(const nlohmann::json& j, TrainRun& r);

// Throws ConfigError naming `where` and the offending key.
void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> keys,
                        std::string_view where);

// Reads j[key] into out when present; type errors become ConfigError naming
// `where.key`.
template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, std::string_view where) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + "." + key + ": " + e.what());
  }
}

}  // namespace fingerlab
