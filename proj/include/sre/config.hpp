#pragma once

// Line-oriented `key = value` config files. '#' starts a comment; blank
// lines are ignored; unknown keys are configuration errors.

#include <map>
#include <string>

#include "sre/trainer.hpp"

namespace sre {

std::map<std::string, std::string> parse_config_file(const std::string& path);
std::map<std::string, std::string> parse_config_text(const std::string& text);

// Applies recognized keys onto the config; throws ConfigError on unknown
// keys or malformed values.
void apply_train_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv);

// The shipped defaults in config-file form.
std::string dump_train_config(const TrainConfig& cfg);

}  // namespace sre
