#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecm/adapter.hpp"
#include "ecm/inference.hpp"
#include "ecm/training.hpp"
#include "ecm/var_core.hpp"

namespace ecm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Plain-text key=value run configuration. The key set is closed: anything
// else is rejected before a run starts.
struct RunConfig {
  ModelConfig model;
  std::vector<int> anchors = {1, 3, 5, 7};
  int ffn_groups = 1;
  int ffn_ratio = 4;
  GateInitConfig gate;
  TrainConfig train;
  SamplerConfig sampler;
  uint64_t seed = 0;

  void validate() const;
};

// Parses `text`; '#' starts a comment, blank lines are skipped.
// Throws ConfigError on unknown keys, bad values, or syntax errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace ecm
