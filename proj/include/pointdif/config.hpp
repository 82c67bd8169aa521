#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pointdif/evaluation.hpp"
#include "pointdif/training.hpp"

namespace pointdif {

// Every tunable of a run. Keys are dotted ("train.epochs", "model.dim"); see
// config_keys() for the full list.
struct Config {
  std::string profile = "desk";
  TrainConfig train = TrainConfig::desk();
  EvalOptions eval;
  int data_points = 256;
  int data_per_class = 50;

  static Config for_profile(std::string_view profile);
};

using KeyValues = std::map<std::string, std::string>;

// `key = value` lines; '#' starts a comment; blank lines ignored.
KeyValues parse_key_values(std::string_view text, const std::string& source = "<config>");
KeyValues load_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

const std::vector<std::string>& config_keys();

// Applies overrides; unknown keys and unparsable values are all collected
// into one ValidationError. The "profile" key is ignored here (see
// resolve_config).
void apply_key_values(Config& config, const KeyValues& kv);
KeyValues to_key_values(const Config& config);

// Profile defaults, then file values, then flag values; validates the result.
Config resolve_config(const KeyValues& file_values, const KeyValues& flag_values);

}  // namespace pointdif
