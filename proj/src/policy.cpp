#include "pmoe/policy.hpp"

#include <algorithm>
#include <cmath>

#include "pmoe/errors.hpp"

namespace pmoe::policy {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // ln(2*pi)

nn::MlpNet make_expert_net(const PolicyConfig& cfg, Rng& rng) {
  return nn::make_mlp(cfg.input_dim, {cfg.hidden, cfg.hidden}, cfg.action_dim,
                      cfg.leaky_slope, rng);
}

nn::MlpNet make_gating_head(const PolicyConfig& cfg, Rng& rng) {
  return nn::make_mlp(cfg.input_dim, {cfg.gating_hidden, cfg.gating_hidden}, 1,
                      cfg.leaky_slope, rng);
}

void check_input(const PolicyState& p, const MatrixXd& x) {
  if (x.rows() != p.config.input_dim)
    throw ShapeError("policy input dimension mismatch");
}

const ExpertNet& active_expert(const PolicyState& p) {
  return p.experts.at(p.active);
}

}  // namespace

PolicyState make_policy(const PolicyConfig& cfg, Rng& rng) {
  if (cfg.input_dim <= 0 || cfg.action_dim <= 0)
    throw ConfigError("policy: input and action dimensions must be positive");
  if (cfg.max_experts < 1) throw ConfigError("policy: max_experts must be >= 1");
  PolicyState p;
  p.config = cfg;

  const int initial =
      cfg.variant == Variant::kSoftMoe || cfg.variant == Variant::kManualPnn
          ? cfg.baseline_experts
          : 1;
  for (int k = 0; k < initial; ++k) {
    ExpertNet e;
    e.net = make_expert_net(cfg, rng);
    e.log_std = nn::Tensor(cfg.action_dim, 1);
    e.log_std.value.setConstant(cfg.log_std_init);
    p.experts.push_back(std::move(e));
    p.adapters.emplace_back();
    p.gating_heads.push_back(make_gating_head(cfg, rng));
    p.gating_frozen.push_back(false);
  }
  if (cfg.variant == Variant::kSoftMoe)
    p.gate = nn::make_mlp(cfg.input_dim, {cfg.gating_hidden}, initial,
                          cfg.leaky_slope, rng);
  p.critic = nn::make_mlp(cfg.input_dim, {cfg.critic_hidden, cfg.critic_hidden},
                          1, cfg.leaky_slope, rng);
  p.active = cfg.variant == Variant::kProgressive ? 0 : initial - 1;
  return p;
}

MatrixXd expert_forward(const PolicyState& p, int k, const MatrixXd& x,
                        PolicyCache& cache) {
  check_input(p, x);
  if (k < 0 || k >= p.expert_count()) throw InputError("expert index");
  if (static_cast<int>(cache.expert_caches.size()) != k)
    throw CacheError("expert_forward: predecessors must be evaluated first");

  const ExpertNet& e = p.experts[k];
  const std::size_t L = e.net.layer_count();
  std::vector<MatrixXd> lateral(L);
  if (k > 0) {
    const AdapterBank& bank = p.adapters[k];
    for (std::size_t t = 0; t < bank.at_layer.size(); ++t) {
      const std::size_t layer = t + 1;  // adapted layers: hidden 2 and output
      MatrixXd sum;
      for (int i = 0; i < k; ++i) {
        const nn::Tensor& a = bank.at_layer[t][i];
        const MatrixXd& src = cache.expert_caches[i].post[layer - 1];
        if (sum.size() == 0)
          sum.noalias() = a.value * src;
        else
          sum.noalias() += a.value * src;
      }
      lateral[layer] = std::move(sum);
    }
  }

  cache.expert_caches.emplace_back();
  const MatrixXd out = e.net.forward(x, &cache.expert_caches.back(), &lateral);
  cache.laterals.push_back(std::move(lateral));
  return out;
}

namespace {

MatrixXd soft_moe_forward(const PolicyState& p, const MatrixXd& x,
                          PolicyCache& cache) {
  const int E = p.expert_count();
  cache.expert_outputs.clear();
  for (int k = 0; k < E; ++k) {
    cache.expert_caches.emplace_back();
    cache.expert_outputs.push_back(
        p.experts[k].net.forward(x, &cache.expert_caches.back()));
  }
  cache.gate_logits = p.gate.forward(x, &cache.gate_cache);
  // column-wise softmax
  cache.gate_weights = cache.gate_logits;
  for (Eigen::Index c = 0; c < cache.gate_weights.cols(); ++c) {
    VectorXd col = cache.gate_weights.col(c);
    col.array() -= col.maxCoeff();
    col = col.array().exp();
    cache.gate_weights.col(c) = col / col.sum();
  }
  MatrixXd mean = MatrixXd::Zero(p.config.action_dim, x.cols());
  for (int k = 0; k < E; ++k)
    mean += cache.expert_outputs[k] *
            cache.gate_weights.row(k).asDiagonal();
  return mean;
}

}  // namespace

MatrixXd compose_mean(const PolicyState& p, const MatrixXd& x,
                      PolicyCache* cache, int subset) {
  check_input(p, x);
  if (p.experts.empty()) throw InputError("policy has no experts");
  PolicyCache local;
  PolicyCache& c = cache ? *cache : local;
  c.input = x;

  MatrixXd mean;
  switch (p.config.variant) {
    case Variant::kProgressive: {
      for (int k = 0; k <= p.active; ++k) {
        const MatrixXd out = expert_forward(p, k, x, c);
        if (k == 0)
          mean = out;
        else
          mean += out;
      }
      break;
    }
    case Variant::kMlp: {
      c.expert_caches.emplace_back();
      mean = p.experts[0].net.forward(x, &c.expert_caches.back());
      break;
    }
    case Variant::kSoftMoe:
      mean = soft_moe_forward(p, x, c);
      break;
    case Variant::kManualPnn: {
      if (subset < 0 || subset >= p.expert_count())
        throw ConfigError("manual-pnn: subset id out of range");
      c.subset = subset;
      c.expert_caches.emplace_back();
      mean = p.experts[subset].net.forward(x, &c.expert_caches.back());
      break;
    }
  }
  c.mean = mean;
  return mean;
}

void backward_mean(PolicyState& p, const PolicyCache& cache,
                   const MatrixXd& dmean) {
  switch (p.config.variant) {
    case Variant::kProgressive: {
      const int k = p.active;
      ExpertNet& e = p.experts[k];
      if (e.frozen) throw InputError("backward through a frozen expert");
      std::vector<MatrixXd> lateral_grads;
      // const_cast is safe: backward only writes gradient accumulators
      auto& ecache = const_cast<nn::ForwardCache&>(cache.expert_caches.at(k));
      e.net.backward(ecache, dmean, &lateral_grads);
      if (k > 0) {
        AdapterBank& bank = p.adapters[k];
        for (std::size_t t = 0; t < bank.at_layer.size(); ++t) {
          const std::size_t layer = t + 1;
          for (int i = 0; i < k; ++i) {
            const MatrixXd& src = cache.expert_caches[i].post[layer - 1];
            bank.at_layer[t][i].grad.noalias() +=
                lateral_grads[layer] * src.transpose();
          }
        }
      }
      break;
    }
    case Variant::kMlp: {
      auto& ecache = const_cast<nn::ForwardCache&>(cache.expert_caches.at(0));
      p.experts[0].net.backward(ecache, dmean);
      break;
    }
    case Variant::kSoftMoe: {
      const int E = p.expert_count();
      MatrixXd gate_logit_grad =
          MatrixXd::Zero(E, cache.input.cols());
      for (int k = 0; k < E; ++k) {
        // expert branch: dL/d out_k = dmean * w_k per column
        MatrixXd g = dmean * cache.gate_weights.row(k).asDiagonal();
        auto& ecache =
            const_cast<nn::ForwardCache&>(cache.expert_caches.at(k));
        p.experts[k].net.backward(ecache, g);
      }
      // gate branch: dL/dw_k = dmean . out_k; softmax jacobian per column
      MatrixXd dw(E, cache.input.cols());
      for (int k = 0; k < E; ++k)
        dw.row(k) = (dmean.cwiseProduct(cache.expert_outputs[k]))
                        .colwise()
                        .sum();
      for (Eigen::Index c = 0; c < cache.input.cols(); ++c) {
        const VectorXd w = cache.gate_weights.col(c);
        const double dot = w.dot(dw.col(c));
        gate_logit_grad.col(c) =
            w.cwiseProduct(dw.col(c) - VectorXd::Constant(w.size(), dot));
      }
      auto& gcache = const_cast<nn::ForwardCache&>(cache.gate_cache);
      p.gate.backward(gcache, gate_logit_grad);
      break;
    }
    case Variant::kManualPnn: {
      auto& ecache = const_cast<nn::ForwardCache&>(cache.expert_caches.at(0));
      p.experts.at(cache.subset).net.backward(ecache, dmean);
      break;
    }
  }
}

ActionSample sample_action(const PolicyState& p, const VectorXd& input,
                           Rng& rng, bool deterministic) {
  const VectorXd mean = compose_mean(p, input);
  const VectorXd log_std = active_expert(p).log_std.value.col(0);
  ActionSample out;
  if (deterministic) {
    out.action = mean;
  } else {
    out.action = mean;
    for (Eigen::Index i = 0; i < mean.size(); ++i)
      out.action[i] += std::exp(log_std[i]) * rng.normal();
  }
  out.log_prob = log_prob(p, mean, out.action);
  return out;
}

double log_prob(const PolicyState& p, const VectorXd& mean,
                const VectorXd& action) {
  if (mean.size() != action.size())
    throw ShapeError("log_prob: mean/action size mismatch");
  const VectorXd log_std = active_expert(p).log_std.value.col(0);
  double lp = 0.0;
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double s = std::exp(log_std[i]);
    const double z = (action[i] - mean[i]) / s;
    lp += -0.5 * z * z - log_std[i] - 0.5 * kLog2Pi;
  }
  return lp;
}

VectorXd log_prob_grad_mean(const PolicyState& p, const VectorXd& mean,
                            const VectorXd& action) {
  const VectorXd log_std = active_expert(p).log_std.value.col(0);
  VectorXd g(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double var = std::exp(2.0 * log_std[i]);
    g[i] = (action[i] - mean[i]) / var;
  }
  return g;
}

VectorXd log_prob_grad_log_std(const PolicyState& p, const VectorXd& mean,
                               const VectorXd& action) {
  const VectorXd log_std = active_expert(p).log_std.value.col(0);
  VectorXd g(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double z = (action[i] - mean[i]) / std::exp(log_std[i]);
    g[i] = z * z - 1.0;
  }
  return g;
}

MatrixXd gating_confidence(const PolicyState& p, const MatrixXd& inputs) {
  check_input(p, inputs);
  MatrixXd out(p.expert_count(), inputs.cols());
  for (int k = 0; k < p.expert_count(); ++k) {
    const MatrixXd logits = p.gating_heads[k].forward(inputs);
    out.row(k) = logits.row(0).unaryExpr(
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  }
  return out;
}

VectorXd gating_confidence(const PolicyState& p, const VectorXd& input) {
  return gating_confidence(p, MatrixXd(input)).col(0);
}

double routing_fraction(double r_k, double r_prev, bool literal) {
  const double ratio = r_k / std::max(r_prev, 1e-6);
  return literal ? std::max(1.0, ratio) : std::min(1.0, ratio);
}

RoutingDecision select_routed(const VectorXd& confidences, double beta) {
  const int n = static_cast<int>(confidences.size());
  if (n == 0) throw InputError("select_routed: empty batch");
  if (!(beta > 0.0) || beta > 1.0)
    throw InputError("select_routed: beta must be in (0, 1]");
  const int take = static_cast<int>(std::ceil(beta * n));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return confidences[a] < confidences[b];
  });
  RoutingDecision d;
  d.beta = beta;
  d.confidences = confidences;
  d.selected.assign(order.begin(), order.begin() + take);
  std::sort(d.selected.begin(), d.selected.end());
  return d;
}

void activate_expert(PolicyState& p, Rng& rng) {
  if (p.config.variant != Variant::kProgressive)
    throw ConfigError("activate_expert requires the progressive variant");
  if (p.expert_count() >= p.config.max_experts)
    throw CapacityError("maximum expert count reached");

  const int k = p.expert_count();
  ExpertNet& prev = p.experts[p.active];
  prev.frozen = true;
  p.gating_frozen[p.active] = true;

  ExpertNet e;
  e.net = nn::make_like(prev.net);
  nn::copy_except_final(prev.net, e.net);
  nn::zero_final(e.net);
  e.log_std = nn::Tensor(p.config.action_dim, 1);
  e.log_std.value = prev.log_std.value;
  p.experts.push_back(std::move(e));

  AdapterBank bank;
  bank.at_layer.resize(2);
  const AdapterBank& prev_bank = p.adapters[k - 1];
  for (int i = 0; i < k; ++i) {
    // hidden-layer adapter: copied from the predecessor where a matching
    // source exists, zero for the brand-new source (the predecessor itself)
    nn::Tensor hidden(p.config.hidden, p.config.hidden);
    if (!prev_bank.at_layer.empty() &&
        i < static_cast<int>(prev_bank.at_layer[0].size()))
      hidden.value = prev_bank.at_layer[0][i].value;
    bank.at_layer[0].push_back(std::move(hidden));

    // last-layer adapter: random at the configured scale
    nn::Tensor last(p.config.action_dim, p.config.hidden);
    for (Eigen::Index r = 0; r < last.value.rows(); ++r)
      for (Eigen::Index c = 0; c < last.value.cols(); ++c)
        last.value(r, c) = p.config.adapter_init_scale * rng.normal();
    bank.at_layer[1].push_back(std::move(last));
  }
  p.adapters.push_back(std::move(bank));

  p.gating_heads.push_back(make_gating_head(p.config, rng));
  p.gating_frozen.push_back(false);
  p.active = k;
}

std::vector<nn::Tensor*> trainable_params(PolicyState& p) {
  std::vector<nn::Tensor*> out;
  auto add_net = [&](nn::MlpNet& net) {
    for (nn::Tensor* t : net.params()) out.push_back(t);
  };
  switch (p.config.variant) {
    case Variant::kProgressive: {
      ExpertNet& e = p.experts[p.active];
      add_net(e.net);
      out.push_back(&e.log_std);
      AdapterBank& bank = p.adapters[p.active];
      for (auto& row : bank.at_layer)
        for (nn::Tensor& t : row) out.push_back(&t);
      add_net(p.gating_heads[p.active]);
      break;
    }
    case Variant::kMlp:
    case Variant::kManualPnn: {
      for (ExpertNet& e : p.experts) {
        add_net(e.net);
        out.push_back(&e.log_std);
      }
      for (std::size_t k = 0; k < p.gating_heads.size(); ++k)
        add_net(p.gating_heads[k]);
      break;
    }
    case Variant::kSoftMoe: {
      for (ExpertNet& e : p.experts) {
        add_net(e.net);
        out.push_back(&e.log_std);
      }
      add_net(p.gate);
      for (std::size_t k = 0; k < p.gating_heads.size(); ++k)
        add_net(p.gating_heads[k]);
      break;
    }
  }
  add_net(p.critic);
  return out;
}

std::vector<nn::Tensor*> all_params(PolicyState& p) {
  std::vector<nn::Tensor*> out;
  auto add_net = [&](nn::MlpNet& net) {
    for (nn::Tensor* t : net.params()) out.push_back(t);
  };
  for (ExpertNet& e : p.experts) {
    add_net(e.net);
    out.push_back(&e.log_std);
  }
  for (AdapterBank& bank : p.adapters)
    for (auto& row : bank.at_layer)
      for (nn::Tensor& t : row) out.push_back(&t);
  for (nn::MlpNet& g : p.gating_heads) add_net(g);
  if (!p.gate.layers.empty()) add_net(p.gate);
  add_net(p.critic);
  return out;
}

double value_estimate(const PolicyState& p, const VectorXd& input) {
  return p.critic.forward(MatrixXd(input))(0, 0);
}

}  // namespace pmoe::policy
