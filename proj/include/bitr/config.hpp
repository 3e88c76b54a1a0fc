#pragma once

// Flat key=value run configuration. '#' starts a comment; keys are
// namespaced model.*, train.* and postproc.*.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "bitr/inference.hpp"
#include "bitr/model.hpp"
#include "bitr/training.hpp"

namespace bitr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PostprocConfig postproc;
};

/// Applies one setting; throws ConfigError for unknown keys or bad values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig parse_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Every recognised key with its current value, one "key = value" per line.
std::string describe(const RunConfig& cfg);

}  // namespace bitr
