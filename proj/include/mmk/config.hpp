#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mmk/generation.hpp"
#include "mmk/model.hpp"
#include "mmk/training.hpp"

namespace mmk {

// Everything a command needs besides data paths.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::size_t retrieve_k = 3;
  int min_freq = 1;

  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// "test-nano", "test-small", "desk-default".
const std::vector<std::string>& preset_names();
// ConfigError for an unknown name.
RunConfig preset(std::string_view name);

// key = value lines, '#' comments, optional [section] headers that prefix
// the following keys ("[train]" then "lr = 1e-3" sets train.lr). Keys not
// set keep their defaults. Errors name source:line.
RunConfig parse_run_config(std::string_view text, const std::string& source);
// A preset name, or a path to a config file.
RunConfig load_run_config(const std::string& name_or_path);
// Every key, grouped by section; parse_run_config round-trips it exactly.
std::string format_run_config(const RunConfig& cfg);

}  // namespace mmk
