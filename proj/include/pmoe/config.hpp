#pragma once

#include <string>
#include <vector>

#include "pmoe/env.hpp"
#include "pmoe/physics.hpp"
#include "pmoe/trainer.hpp"

namespace pmoe::config {

// One structured run description; unknown keys are rejected with the
// offending key path in the error message.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::string variant = "progressive";
  std::string character_model;  // empty = built-in default character
  std::vector<std::string> clips;
  int iterations = 200;
  int hidden = 64;
  int gating_hidden = 32;
  int critic_hidden = 64;
  double adapter_init_scale = 1e-3;
  double log_std_init = -1.6;
  bool literal_routing = false;
  int baseline_experts = 2;
  phys::SimConfig sim;
  env::EnvConfig env;
  trainer::TrainerConfig trainer;

  bool operator==(const RunConfig& other) const;
};

RunConfig parse_run_config(const std::string& text);
std::string serialize_run_config(const RunConfig& cfg);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

}  // namespace pmoe::config
