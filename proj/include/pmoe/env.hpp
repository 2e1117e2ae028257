#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmoe/motion.hpp"
#include "pmoe/physics.hpp"
#include "pmoe/rng.hpp"

namespace pmoe::env {

using Eigen::VectorXd;
using motion::MotionClip;

// Everything the character knows about itself: body positions and linear
// velocities in its own root-heading frame.
struct HumanoidState {
  std::vector<Vec2> local_pos;  // B
  std::vector<Vec2> local_vel;  // B

  VectorXd flatten() const;  // B*4
};

// Target offsets for the next reference frame, in the character's local
// frame, plus the target joint trajectory values.
struct GoalState {
  std::vector<Vec2> dpos;   // B
  VectorXd dheading;        // B, wrapped to (-pi, pi]
  std::vector<Vec2> dvel;   // B
  VectorXd dangvel;         // B
  VectorXd joint_pos;       // J
  VectorXd joint_vel;       // J

  VectorXd flatten() const;  // B*6 + J*2
};

struct RewardParams {
  // kernel scales and weights for (p, q, v, a, jp, jv)
  double alpha[6] = {20.0, 10.0, 2.0, 0.5, 10.0, 0.5};
  double weights[6] = {0.3, 0.2, 0.1, 0.1, 0.2, 0.1};
  double energy_scale = 0.002;  // c in r_energy = -c * mean |tau * qdot|
};

struct RewardBreakdown {
  double rp = 0.0, rq = 0.0, rv = 0.0, ra = 0.0, rjp = 0.0, rjv = 0.0;
  double r_track = 0.0;   // weighted sum, in [0, 1]
  double r_energy = 0.0;  // <= 0
  double r_total = 0.0;   // r_track + 0.5 * r_energy
};

enum class PerturbationMode { kNone, kObject, kNoise };

struct PerturbationConfig {
  PerturbationMode mode = PerturbationMode::kNone;
  std::vector<double> object_masses = {3.0, 7.0, 15.0};  // kg
  double throw_interval = 2.0;  // s
  double throw_speed = 6.0;     // m/s
  double noise_scale = 0.0;     // std on normalized observation features
};

enum class ActionMode { kResidual, kAbsolute };

struct EnvConfig {
  int max_episode_steps = 300;  // 10 s at 30 Hz
  double termination_threshold = 0.5;  // m, strict
  bool randomize_start_frame = true;
  ActionMode action_mode = ActionMode::kResidual;
  PerturbationConfig perturbation;
};

enum class StepStatus { kContinue, kTerminated, kTruncated };

// ---- stateless building blocks ----

HumanoidState observe(const phys::World& world, const phys::SimState& s,
                      int character);

GoalState goal_features(const phys::World& world, const phys::SimState& s,
                        const MotionClip& clip, int target_frame,
                        int character);

// r_track and its components against the given clip frame; r_energy/r_total
// are left for the caller (they need actuation power).
RewardBreakdown tracking_reward(const phys::World& world,
                                const phys::SimState& s, const MotionClip& clip,
                                int frame, int character,
                                const RewardParams& params);

double energy_reward(const VectorXd& torques, const VectorXd& joint_rates,
                     double scale);

// Reward composition: r_total = r_track + 0.5 * r_energy.
double total_reward(double r_track, double r_energy);

// Mean world-space body position distance to the clip frame.
double mean_body_error(const phys::World& world, const phys::SimState& s,
                       const MotionClip& clip, int frame, int character);

StepStatus check_termination(const phys::World& world, const phys::SimState& s,
                             const MotionClip& clip, int frame,
                             const EnvConfig& cfg, int steps_taken);

// Object-mode perturbations: spawns projectiles at the configured cadence.
// `next_throw_time` is per-episode scheduler state owned by the caller.
void apply_perturbations(const phys::World& world, phys::SimState& s,
                         const PerturbationConfig& cfg, Rng& rng,
                         double* next_throw_time);

// Noise-mode perturbations: additive Gaussian noise on the (normalized)
// HumanoidState slice of a feature vector.
void apply_observation_noise(VectorXd& features, int obs_dim, double sigma,
                             Rng& rng);

// ---- running observation normalizer ----

class RunningNorm {
 public:
  RunningNorm() = default;
  explicit RunningNorm(Eigen::Index dim);

  void update(const VectorXd& x);
  VectorXd normalize(const VectorXd& x) const;
  void merge(const RunningNorm& other);

  Eigen::Index dim() const { return mean_.size(); }
  double count() const { return count_; }
  const VectorXd& mean() const { return mean_; }
  VectorXd std() const;

  // serialization hooks for checkpoints
  const VectorXd& m2() const { return m2_; }
  void restore(double count, VectorXd mean, VectorXd m2);

 private:
  double count_ = 0.0;
  VectorXd mean_;
  VectorXd m2_;
};

// ---- episode-managing wrapper ----

struct EnvStepResult {
  std::vector<VectorXd> features;  // per character, obs + goal
  std::vector<RewardBreakdown> rewards;
  StepStatus status = StepStatus::kContinue;
  double mean_error = 0.0;  // worst character's mean body error, m
  int contact_count = 0;
};

class TrackingEnv {
 public:
  TrackingEnv(const phys::World* world, EnvConfig cfg);

  std::vector<VectorXd> reset(const MotionClip* clip, Rng& rng);
  std::vector<VectorXd> reset_at(const MotionClip* clip, int start_frame);
  EnvStepResult step(const std::vector<VectorXd>& actions, Rng& rng);

  int frame() const { return frame_; }
  int steps_taken() const { return steps_; }
  const phys::SimState& sim() const { return sim_; }
  const MotionClip& clip() const { return *clip_; }
  const phys::World& world() const { return *world_; }
  const EnvConfig& config() const { return cfg_; }
  const RewardParams& reward_params() const { return reward_params_; }
  int feature_dim() const;
  int observation_dim() const;  // HumanoidState slice size
  int action_dim() const;

 private:
  std::vector<VectorXd> gather_features() const;

  const phys::World* world_;
  EnvConfig cfg_;
  RewardParams reward_params_;
  const MotionClip* clip_ = nullptr;
  phys::SimState sim_;
  int frame_ = 0;
  int steps_ = 0;
  double next_throw_ = 0.0;
};

// ---- episode trace CSV ----

struct EpisodeRow {
  double time = 0.0;
  std::vector<RewardBreakdown> rewards;  // per character
  double mean_error = 0.0;
  int contact_count = 0;
  bool terminated = false;
};

void write_episode_csv(const std::vector<EpisodeRow>& rows, int characters,
                       const std::string& path);

}  // namespace pmoe::env
