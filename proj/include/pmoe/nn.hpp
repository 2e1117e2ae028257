#pragma once

#include <Eigen/Dense>
#include <vector>

#include "pmoe/rng.hpp"

namespace pmoe::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// A parameter tensor with its gradient accumulator.
struct Tensor {
  MatrixXd value;
  MatrixXd grad;

  Tensor() = default;
  Tensor(Eigen::Index rows, Eigen::Index cols)
      : value(MatrixXd::Zero(rows, cols)), grad(MatrixXd::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

struct DenseLayer {
  Tensor weights;  // [out x in]
  Tensor bias;     // [out x 1]

  Eigen::Index in_dim() const { return weights.value.cols(); }
  Eigen::Index out_dim() const { return weights.value.rows(); }
};

// Activations cached by a forward pass; inputs are column-batched (d x N).
struct ForwardCache {
  MatrixXd input;
  std::vector<MatrixXd> pre;   // pre-activation z_l per layer
  std::vector<MatrixXd> post;  // post-activation h_l per layer (last = z_L)
};

// Dense MLP with leaky-rectifier hidden activations and a linear final layer.
// Optional lateral inputs are added to a layer's pre-activation, which is how
// progressive adapters feed into an expert.
class MlpNet {
 public:
  std::vector<DenseLayer> layers;
  double leaky_slope = 0.01;

  Eigen::Index input_dim() const { return layers.front().in_dim(); }
  Eigen::Index output_dim() const { return layers.back().out_dim(); }
  std::size_t layer_count() const { return layers.size(); }

  // lateral, if given, has one entry per layer; an empty matrix means no
  // lateral input at that layer.
  MatrixXd forward(const MatrixXd& input, ForwardCache* cache = nullptr,
                   const std::vector<MatrixXd>* lateral = nullptr) const;

  // Accumulates parameter gradients into the tensors and returns the input
  // gradient. lateral_grads, if given, receives dL/dz_l per layer (the
  // gradient seen by any lateral input added at that layer).
  MatrixXd backward(const ForwardCache& cache, const MatrixXd& out_grad,
                    std::vector<MatrixXd>* lateral_grads = nullptr);

  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  void zero_grads();
};

MlpNet make_mlp(Eigen::Index in, const std::vector<Eigen::Index>& hidden,
                Eigen::Index out, double leaky_slope, Rng& rng);

// Architecture copy with all parameters zeroed.
MlpNet make_like(const MlpNet& src);

void check_same_architecture(const MlpNet& a, const MlpNet& b);

// Copies every layer but the last from src into dst.
void copy_except_final(const MlpNet& src, MlpNet& dst);

// Zeroes the final layer's weights and bias.
void zero_final(MlpNet& net);

double frobenius_norm(const Tensor& t);

// Sum of per-layer weight-matrix Frobenius norms (biases excluded).
double weight_norm_sum(const MlpNet& net);

// ---- optimizer ----

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  MatrixXd m;  // first moment
  MatrixXd v;  // second moment
};

// One bias-corrected update of a single tensor; step is the post-increment
// counter value (1 on the first call).
void adam_update(Tensor& param, AdamState& state, const AdamConfig& cfg,
                 long step);

// Optimizer over a fixed list of tensors.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor*> params, AdamConfig cfg);

  void step();
  void zero_grad();

  long step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<AdamState>& states() { return states_; }
  void set_step_count(long s) { step_ = s; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
  long step_ = 0;
};

}  // namespace pmoe::nn
