#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "parkgauss/trainer.hpp"

namespace parkgauss {

// JSON view of TrainConfig. Every tunable constant is reachable by name;
// enums serialize as the strings the CLI accepts. config_from_json applied
// to config_to_json output reproduces the input bit for bit.
nlohmann::json config_to_json(const TrainConfig& cfg);

// Merges the keys present in `j` into `cfg`. Unknown keys and type
// mismatches raise UsageError naming the offending dotted path; absent keys
// keep their current values, so defaults <- file <- flags layering is just
// repeated application.
void apply_config_json(TrainConfig& cfg, const nlohmann::json& j,
                       const std::string& where = "config");

TrainConfig config_from_json(const nlohmann::json& j);

// Reads and merges a JSON config file over `cfg`. Missing or unreadable
// file / malformed JSON -> DataError naming the path; bad keys -> UsageError.
void apply_config_file(TrainConfig& cfg, const std::string& path);

// FNV-1a 64 of the canonical dump, as 16 hex digits. Stable across runs;
// used to stamp manifests.
std::string config_hash(const TrainConfig& cfg);

}  // namespace parkgauss
