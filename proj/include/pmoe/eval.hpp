#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmoe/env.hpp"
#include "pmoe/motion.hpp"
#include "pmoe/physics.hpp"
#include "pmoe/policy.hpp"
#include "pmoe/rng.hpp"

namespace pmoe::eval {

using Eigen::VectorXd;

struct TraceFrame {
  std::vector<double> mean_body_error;        // per character, m
  std::vector<VectorXd> joint_errors;         // per character, per body, m
  bool terminated = false;
};

struct EpisodeTrace {
  std::string clip_id;
  std::uint64_t seed = 0;
  std::vector<TraceFrame> frames;

  int frame_count() const { return static_cast<int>(frames.size()); }
};

struct ClipMetrics {
  std::string clip_id;
  double success_rate = 0.0;
  double mpjpe_mm = 0.0;
  double mean_episode_s = 0.0;
  int episodes = 0;
};

struct MetricsReport {
  std::string checkpoint;
  std::string clip_set;
  std::string perturbation_mode = "none";
  double perturbation_level = 0.0;
  double success_rate = 0.0;
  double mpjpe_mm = 0.0;
  double mean_episode_s = 0.0;
  std::vector<ClipMetrics> per_clip;
};

// True iff every character's per-frame average joint position error stays
// strictly below `threshold` at every frame.
bool episode_success(const EpisodeTrace& trace, double threshold = 0.5);

// Mean Euclidean joint position error over frames, joints, characters, and
// episodes, in millimetres.
double mpjpe_mm(const std::vector<EpisodeTrace>& traces);

double mean_episode_length_s(const std::vector<EpisodeTrace>& traces,
                             double control_rate);

struct EvalSettings {
  int episodes_per_clip = 4;
  std::uint64_t seed = 0;
  env::EnvConfig env;  // randomize_start_frame usually off for evaluation
};

// Deterministic rollout of the policy mean on one clip.
EpisodeTrace rollout_trace(const phys::World& world,
                           const policy::PolicyState& policy,
                           const env::RunningNorm& norm,
                           const motion::MotionClip& clip,
                           const env::EnvConfig& cfg, std::uint64_t seed);

MetricsReport run_evaluation(const phys::World& world,
                             const policy::PolicyState& policy,
                             const env::RunningNorm& norm,
                             const motion::ClipLibrary& library,
                             const EvalSettings& settings);

// One report per perturbation level; mode "object" sweeps projectile mass,
// "noise" sweeps observation noise scale.
std::vector<MetricsReport> run_perturbation_sweep(
    const phys::World& world, const policy::PolicyState& policy,
    const env::RunningNorm& norm, const motion::ClipLibrary& library,
    const EvalSettings& settings, const std::string& mode,
    const std::vector<double>& levels);

// Stable key order: checkpoint, clip_set, perturbation{mode, level},
// success_rate, mpjpe_mm, mean_episode_s, per_clip[...].
std::string report_to_json(const MetricsReport& report);
void write_report_json(const std::vector<MetricsReport>& reports,
                       const std::string& path);

}  // namespace pmoe::eval
