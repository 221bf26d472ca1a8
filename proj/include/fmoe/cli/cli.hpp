// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "fmoe/data/dataset.hpp"
#include "fmoe/data/synthetic.hpp"
#include "fmoe/expert/expert.hpp"
#include "fmoe/federation/config.hpp"

namespace fmoe::cli {

struct RunConfig {
  std::string scenario;              // manifest path; empty means synthetic
  std::string synthetic = "default";  // default | independent
  data::SyntheticSpec synthetic_spec;
  data::DataConfig data;
  expert::EncoderConfig encoder;
  federation::TrainConfig train;
  std::string mode = "fmoe";
  std::string preset;                 // fkcb | mbg | sgh
  long two_phase_epochs = -1;         // >= 0 runs the two-phase schedule
  std::string output_dir;
  std::string precision = "f32";      // f32 | f64
  bool log_gate_weights = false;
};

// Environment variable naming the default output directory.
inline constexpr const char* kOutputDirEnv = "FMOE_OUTPUT_DIR";

// Throws ConfigError on anything inconsistent; run before any training.
void validate(const RunConfig& config);

// key=value text accepted by --config; every value materialised.
std::string to_config_text(const RunConfig& config);

data::ScenarioSpec load_run_scenario(const RunConfig& config);

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(int argc, const char* const* argv);

}  // namespace fmoe::cli
