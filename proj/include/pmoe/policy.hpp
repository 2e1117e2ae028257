#pragma once

#include <Eigen/Dense>
#include <vector>

#include "pmoe/nn.hpp"
#include "pmoe/rng.hpp"

namespace pmoe::policy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Variant { kProgressive, kMlp, kSoftMoe, kManualPnn };

struct PolicyConfig {
  int input_dim = 0;
  int action_dim = 0;
  int hidden = 64;          // expert hidden width (2 hidden layers)
  int gating_hidden = 32;   // per-head reward predictor width
  int critic_hidden = 64;
  int max_experts = 4;
  double adapter_init_scale = 1e-3;
  double log_std_init = -1.6;
  double leaky_slope = 0.01;
  Variant variant = Variant::kProgressive;
  // Eq. 7 as printed uses max(1, r_k/r_{k-1}); kept available for audit runs.
  bool literal_routing = false;
  int baseline_experts = 2;  // soft-moe / manual-pnn expert count
};

struct ExpertNet {
  nn::MlpNet net;       // 3 dense layers
  nn::Tensor log_std;   // action_dim x 1, per-expert
  bool frozen = false;
};

// Lateral adapters into one expert: at_layer[t][i] maps source expert i's
// post-activation at layer (l-1) into this expert's layer-l pre-activation,
// where l = t + 1 over the two adapted layers (hidden 2 and output).
struct AdapterBank {
  std::vector<std::vector<nn::Tensor>> at_layer;  // [2][k] once expert k > 0
};

struct PolicyState {
  PolicyConfig config;
  std::vector<ExpertNet> experts;
  std::vector<AdapterBank> adapters;      // adapters[k] feeds expert k
  std::vector<nn::MlpNet> gating_heads;   // one scalar-logit head per expert
  std::vector<bool> gating_frozen;
  nn::MlpNet gate;    // soft-moe mixing gate (logits over experts)
  nn::MlpNet critic;  // shared value function
  int active = 0;

  int expert_count() const { return static_cast<int>(experts.size()); }
};

PolicyState make_policy(const PolicyConfig& cfg, Rng& rng);

// Forward bookkeeping needed to run backward and to reuse predecessor
// activations across experts.
struct PolicyCache {
  MatrixXd input;
  std::vector<nn::ForwardCache> expert_caches;
  std::vector<std::vector<MatrixXd>> laterals;  // laterals[k][layer]
  MatrixXd mean;
  // soft-moe extras
  MatrixXd gate_logits;
  MatrixXd gate_weights;
  std::vector<MatrixXd> expert_outputs;
  nn::ForwardCache gate_cache;
  int subset = -1;  // manual-pnn routing id
};

// One expert's contribution, including lateral adapter input from all earlier
// experts. Requires experts 0..k-1 already evaluated into `cache`.
MatrixXd expert_forward(const PolicyState& p, int k, const MatrixXd& x,
                        PolicyCache& cache);

// Additive composition over experts 0..active (Eq. 6). For baseline variants
// this dispatches to the variant's own forward rule.
MatrixXd compose_mean(const PolicyState& p, const MatrixXd& x,
                      PolicyCache* cache = nullptr, int subset = 0);

// Accumulates gradients of a loss in the composed mean into every trainable
// tensor (active expert, its adapters, baseline nets). Frozen experts stay
// untouched; lateral gradients do not flow into frozen predecessors.
void backward_mean(PolicyState& p, const PolicyCache& cache,
                   const MatrixXd& dmean);

struct ActionSample {
  VectorXd action;
  double log_prob = 0.0;
};

// Masked Gaussian of Eq. 8: only the active expert's log_std is used.
ActionSample sample_action(const PolicyState& p, const VectorXd& input,
                           Rng& rng, bool deterministic = false);

double log_prob(const PolicyState& p, const VectorXd& mean,
                const VectorXd& action);

// d log N(a; mean, std) / d mean and / d log_std for the active expert.
VectorXd log_prob_grad_mean(const PolicyState& p, const VectorXd& mean,
                            const VectorXd& action);
VectorXd log_prob_grad_log_std(const PolicyState& p, const VectorXd& mean,
                               const VectorXd& action);

// Per-expert reward confidences r~ (Eq. 5), each strictly in (0, 1).
VectorXd gating_confidence(const PolicyState& p, const VectorXd& input);
// Batched: experts x samples.
MatrixXd gating_confidence(const PolicyState& p, const MatrixXd& inputs);

double routing_fraction(double r_k, double r_prev, bool literal = false);

struct RoutingDecision {
  double beta = 1.0;
  std::vector<int> selected;      // sample indices, ascending
  VectorXd confidences;           // r~_{k-1} used for ranking
};

RoutingDecision select_routed(const VectorXd& confidences, double beta);

// Progression protocol: freeze the active expert (and its gating head),
// append a new expert per the copy/zero/adapter-init rules.
void activate_expert(PolicyState& p, Rng& rng);

// All tensors the optimizer may update in the current configuration.
std::vector<nn::Tensor*> trainable_params(PolicyState& p);
// Every tensor, for serialization.
std::vector<nn::Tensor*> all_params(PolicyState& p);

double value_estimate(const PolicyState& p, const VectorXd& input);

}  // namespace pmoe::policy
