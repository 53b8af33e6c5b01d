#pragma once

// Flat key = value run configuration shared by every command.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fln/backbone.hpp"
#include "fln/data.hpp"
#include "fln/fln.hpp"
#include "fln/train.hpp"

namespace fln {

struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::size_t threads = 1;

  std::string data_source = "synthetic";  // synthetic | trajnet
  SyntheticConfig synthetic;
  std::size_t trajnet_window_step = 1;

  BackboneConfig backbone;
  BranchConfig branches;
  TrainConfig train;
  EvalOptions eval;

  // Throws ConfigError naming the key for unknown keys and malformed values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // Every key with its current value, in documentation order.
  std::vector<std::pair<std::string, std::string>> items() const;
  std::string to_text() const;

  void validate() const;
  TrainSetup setup() const;
  EvalWindow window() const { return {branches.lengths[2], backbone.horizon}; }
  // Scene length the protocol needs: H_L + T.
  std::size_t scene_steps() const { return branches.lengths[2] + backbone.horizon; }

  // Lines of "key = value"; blank lines and lines starting with '#' are skipped.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

struct ConfigKey {
  std::string key;
  std::string description;
};
const std::vector<ConfigKey>& config_keys();

// "4..30" (inclusive range), "3,5,7", or a mix such as "2,4..6".
std::vector<std::size_t> parse_length_list(const std::string& text);

}  // namespace fln
