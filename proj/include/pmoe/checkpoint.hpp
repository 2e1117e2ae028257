#pragma once

#include <string>
#include <vector>

#include "pmoe/env.hpp"
#include "pmoe/motion.hpp"
#include "pmoe/nn.hpp"
#include "pmoe/policy.hpp"

namespace pmoe::checkpoint {

// Everything beyond the policy needed to resume training mid-run.
struct TrainerSnapshot {
  int iteration = 0;
  std::vector<double> confidence_history;
  double norm_count = 0.0;
  Eigen::VectorXd norm_mean;
  Eigen::VectorXd norm_m2;
  long opt_step = 0;
  std::vector<nn::AdamState> opt_states;
  long gating_step = 0;
  std::vector<nn::AdamState> gating_states;
  std::vector<std::string> clip_ids;
  std::vector<motion::ClipStats> clip_stats;
};

// Format: magic "PMOE", u32 version, u32 manifest length, JSON manifest
// (architecture, frozen flags, counters, block table), then little-endian
// f64 parameter blocks in manifest order.
void save_checkpoint(const std::string& path, const policy::PolicyState& p,
                     const TrainerSnapshot* snap = nullptr);

policy::PolicyState load_checkpoint(const std::string& path,
                                    TrainerSnapshot* snap = nullptr);

std::string variant_name(policy::Variant v);
policy::Variant variant_from_name(const std::string& name);

}  // namespace pmoe::checkpoint
