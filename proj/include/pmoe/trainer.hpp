#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmoe/env.hpp"
#include "pmoe/motion.hpp"
#include "pmoe/nn.hpp"
#include "pmoe/physics.hpp"
#include "pmoe/policy.hpp"
#include "pmoe/rng.hpp"

namespace pmoe::trainer {

using Eigen::VectorXd;

enum class SamplingStrategy { kUniform, kDuration, kSuccessRate, kTrackingReward };

SamplingStrategy sampling_strategy_from_string(const std::string& s);
std::string to_string(SamplingStrategy s);

struct TrainerConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip_eps = 0.2;
  int epochs = 4;
  int minibatch_size = 64;
  int rollout_steps = 1024;  // transitions per iteration (summed over chars)
  double adapter_weight = 0.03;
  double learning_rate = 3e-4;
  double gating_learning_rate = 3e-4;
  double entropy_coef = 0.0;
  SamplingStrategy strategy = SamplingStrategy::kTrackingReward;
  double temperature = 0.2;
  int stagnation_window = 50;
  double stagnation_delta = 0.01;
  int max_experts = 4;
  double adapter_init_scale = 1e-3;
  bool pss_enabled = true;
  int routing_candidates = 8;  // episode candidates ranked per routing round

  void validate() const;  // throws ConfigError
};

// Flat transition storage; episodes are delimited by `dones`. A done step
// carries the value of the successor state in `bootstrap` (0 on terminal
// failure, V(s') on truncation).
struct RolloutBuffer {
  std::vector<VectorXd> features;
  std::vector<VectorXd> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<env::RewardBreakdown> rewards;
  std::vector<unsigned char> dones;
  std::vector<double> bootstrap;
  std::vector<int> clip_ids;
  std::vector<int> expert_ids;
  std::vector<VectorXd> confidences;

  VectorXd advantages;  // filled by compute_gae
  VectorXd returns;

  std::size_t size() const { return features.size(); }
  void clear();
  void check_aligned() const;  // throws ShapeError
};

struct SamplerState {
  VectorXd probs;  // per clip, nonnegative, sums to 1
};

VectorXd sampling_probs(const motion::ClipLibrary& library,
                        SamplingStrategy strategy, double temperature);

// Standard recursive GAE over `rewards[i].r_total`; fills buf.advantages and
// buf.returns (raw, un-normalized).
void compute_gae(RolloutBuffer& buf, double gamma, double lambda);

VectorXd normalize_advantages(const VectorXd& adv);

struct PpoLosses {
  double policy = 0.0;
  double value = 0.0;
};

PpoLosses ppo_losses(const VectorXd& new_log_probs,
                     const VectorXd& old_log_probs, const VectorXd& advantages,
                     const VectorXd& value_preds, const VectorXd& value_targets,
                     double clip_eps);

// Eq. 9-10 reuse pressure on the active expert's adapters. With
// accumulate_grads, adds grad_scale * dL/dtheta into adapter and active
// expert weight tensors.
double adapter_loss(policy::PolicyState& p, bool accumulate_grads = false,
                    double grad_scale = 1.0);

// Eq. 11: Euclidean norm of (actual - predicted) over the batch.
double gating_loss(const VectorXd& predicted, const VectorXd& actual);
VectorXd gating_loss_grad(const VectorXd& predicted, const VectorXd& actual);

double total_loss(double l_policy, double l_value, double l_adapter,
                  double adapter_weight = 0.03);

// True iff `history` holds two full windows and the newest window's mean
// improved on the previous window's by less than `delta` (relative).
bool stagnation_check(const std::vector<double>& history, int window,
                      double delta);

struct IterationMetrics {
  int iteration = 0;
  double wall_s = 0.0;
  double mean_r_track = 0.0;
  double mean_r_total = 0.0;
  double success_rate = 0.0;
  double mean_episode_s = 0.0;
  int active_expert = 0;
  double beta = 1.0;
  double loss_policy = 0.0;
  double loss_value = 0.0;
  double loss_adapter = 0.0;
  double loss_gating = 0.0;
  double loss_total = 0.0;
  int steps = 0;
  int episodes = 0;
  bool expert_activated = false;
};

void write_curves_csv(const std::vector<IterationMetrics>& rows,
                      const std::string& path);

class Trainer {
 public:
  Trainer(const phys::World* world, motion::ClipLibrary* library,
          policy::PolicyState* policy, TrainerConfig cfg,
          env::EnvConfig env_cfg, std::uint64_t seed);

  IterationMetrics iterate();

  int iteration() const { return iteration_; }
  void set_iteration(int it) { iteration_ = it; }

  policy::PolicyState& policy() { return *policy_; }
  env::RunningNorm& normalizer() { return norm_; }
  const env::RunningNorm& normalizer() const { return norm_; }
  nn::Adam& optimizer() { return opt_; }
  nn::Adam& gating_optimizer() { return gating_opt_; }
  std::vector<double>& confidence_history() { return conf_history_; }
  Rng& rng() { return rng_; }

  // rebinds optimizers after policy mutation (activation / checkpoint load)
  void rebuild_optimizers();

 private:
  struct EpisodeCandidate {
    int clip = 0;
    int start_frame = 0;
    double confidence = 0.0;  // predecessor head's r~ at the start state
  };

  double collect_rollouts(RolloutBuffer& buf, IterationMetrics& m);
  void update_policy(RolloutBuffer& buf, IterationMetrics& m);
  void update_gating(RolloutBuffer& buf, IterationMetrics& m);

  const phys::World* world_;
  motion::ClipLibrary* library_;
  policy::PolicyState* policy_;
  TrainerConfig cfg_;
  env::TrackingEnv env_;
  env::RunningNorm norm_;
  nn::Adam opt_;
  nn::Adam gating_opt_;
  Rng rng_;
  std::vector<double> conf_history_;
  int iteration_ = 0;
};

}  // namespace pmoe::trainer
