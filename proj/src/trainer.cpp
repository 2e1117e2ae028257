#include "pmoe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "pmoe/errors.hpp"

namespace pmoe::trainer {

using Eigen::MatrixXd;

SamplingStrategy sampling_strategy_from_string(const std::string& s) {
  if (s == "uniform") return SamplingStrategy::kUniform;
  if (s == "duration") return SamplingStrategy::kDuration;
  if (s == "success-rate") return SamplingStrategy::kSuccessRate;
  if (s == "tracking-reward") return SamplingStrategy::kTrackingReward;
  throw ConfigError("unknown sampling strategy: " + s);
}

std::string to_string(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::kUniform: return "uniform";
    case SamplingStrategy::kDuration: return "duration";
    case SamplingStrategy::kSuccessRate: return "success-rate";
    case SamplingStrategy::kTrackingReward: return "tracking-reward";
  }
  throw ConfigError("invalid sampling strategy value");
}

void TrainerConfig::validate() const {
  if (gamma <= 0.0 || gamma >= 1.0)
    throw ConfigError("gamma must lie in (0, 1)");
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("lambda must lie in [0, 1]");
  if (clip_eps <= 0.0) throw ConfigError("clip epsilon must be positive");
  if (epochs < 1 || minibatch_size < 1 || rollout_steps < 1)
    throw ConfigError("epochs, minibatch size, and rollout steps must be >= 1");
  if (adapter_weight < 0.0 || entropy_coef < 0.0)
    throw ConfigError("loss weights must be nonnegative");
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
  if (stagnation_window < 1) throw ConfigError("stagnation window must be >= 1");
  if (max_experts < 1) throw ConfigError("max experts must be >= 1");
  if (routing_candidates < 1)
    throw ConfigError("routing candidates must be >= 1");
}

void RolloutBuffer::clear() {
  features.clear();
  actions.clear();
  log_probs.clear();
  values.clear();
  rewards.clear();
  dones.clear();
  bootstrap.clear();
  clip_ids.clear();
  expert_ids.clear();
  confidences.clear();
  advantages.resize(0);
  returns.resize(0);
}

void RolloutBuffer::check_aligned() const {
  const std::size_t n = features.size();
  if (actions.size() != n || log_probs.size() != n || values.size() != n ||
      rewards.size() != n || dones.size() != n || bootstrap.size() != n ||
      clip_ids.size() != n || expert_ids.size() != n ||
      confidences.size() != n)
    throw ShapeError("rollout buffer sequences are misaligned");
}

VectorXd sampling_probs(const motion::ClipLibrary& library,
                        SamplingStrategy strategy, double temperature) {
  if (library.empty()) throw InputError("sampling over an empty clip library");
  const Eigen::Index m = static_cast<Eigen::Index>(library.size());
  VectorXd score(m);
  switch (strategy) {
    case SamplingStrategy::kUniform:
      return VectorXd::Constant(m, 1.0 / static_cast<double>(m));
    case SamplingStrategy::kDuration: {
      for (Eigen::Index i = 0; i < m; ++i) score[i] = library.duration(i);
      return score / score.sum();
    }
    case SamplingStrategy::kSuccessRate:
      for (Eigen::Index i = 0; i < m; ++i)
        score[i] = library.success_fraction(i);
      break;
    case SamplingStrategy::kTrackingReward:
      for (Eigen::Index i = 0; i < m; ++i)
        score[i] = library.stats(i).mean_track_reward;
      break;
  }
  if (temperature <= 0.0) throw InputError("softmax temperature must be > 0");
  VectorXd logits = -score / temperature;
  logits.array() -= logits.maxCoeff();
  VectorXd p = logits.array().exp();
  return p / p.sum();
}

void compute_gae(RolloutBuffer& buf, double gamma, double lambda) {
  buf.check_aligned();
  const Eigen::Index n = static_cast<Eigen::Index>(buf.size());
  buf.advantages.resize(n);
  buf.returns.resize(n);
  double gae = 0.0;
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    const bool done = buf.dones[i] != 0;
    const double next_value =
        (done || i + 1 == n) ? buf.bootstrap[i] : buf.values[i + 1];
    if (done) gae = 0.0;
    const double delta =
        buf.rewards[i].r_total + gamma * next_value - buf.values[i];
    gae = delta + gamma * lambda * gae;
    buf.advantages[i] = gae;
    buf.returns[i] = gae + buf.values[i];
  }
}

VectorXd normalize_advantages(const VectorXd& adv) {
  if (adv.size() == 0) return adv;
  const double mean = adv.mean();
  const double var = (adv.array() - mean).square().mean();
  return (adv.array() - mean) / (std::sqrt(var) + 1e-8);
}

PpoLosses ppo_losses(const VectorXd& new_log_probs,
                     const VectorXd& old_log_probs, const VectorXd& advantages,
                     const VectorXd& value_preds, const VectorXd& value_targets,
                     double clip_eps) {
  const Eigen::Index n = new_log_probs.size();
  if (old_log_probs.size() != n || advantages.size() != n ||
      value_preds.size() != value_targets.size())
    throw ShapeError("ppo loss inputs are misaligned");
  double surr = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ratio = std::exp(new_log_probs[i] - old_log_probs[i]);
    const double clipped =
        std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    surr += std::min(ratio * advantages[i], clipped * advantages[i]);
  }
  PpoLosses out;
  out.policy = -surr / static_cast<double>(n);
  out.value = (value_preds - value_targets).squaredNorm() /
              static_cast<double>(value_targets.size());
  return out;
}

double adapter_loss(policy::PolicyState& p, bool accumulate_grads,
                    double grad_scale) {
  constexpr double kEps = 1e-6;
  if (p.config.variant != policy::Variant::kProgressive || p.active == 0)
    return 0.0;

  std::vector<nn::Tensor*> adapter_ts;
  for (auto& row : p.adapters[p.active].at_layer)
    for (nn::Tensor& t : row) adapter_ts.push_back(&t);
  std::vector<nn::Tensor*> expert_ts;
  for (nn::DenseLayer& l : p.experts[p.active].net.layers)
    expert_ts.push_back(&l.weights);

  double a_norm = 0.0, e_norm = 0.0;
  for (nn::Tensor* t : adapter_ts) a_norm += t->value.norm();
  for (nn::Tensor* t : expert_ts) e_norm += t->value.norm();

  const double denom = a_norm + e_norm;
  const double u = denom > 0.0 ? a_norm / denom : 0.0;
  const double loss = -std::log(u + kEps);

  if (accumulate_grads && denom > 0.0) {
    const double dl_du = -1.0 / (u + kEps);
    const double du_da = e_norm / (denom * denom);
    const double du_de = -a_norm / (denom * denom);
    for (nn::Tensor* t : adapter_ts) {
      const double n = t->value.norm();
      if (n > 1e-12)
        t->grad += grad_scale * dl_du * du_da / n * t->value;
    }
    for (nn::Tensor* t : expert_ts) {
      const double n = t->value.norm();
      if (n > 1e-12)
        t->grad += grad_scale * dl_du * du_de / n * t->value;
    }
  }
  return loss;
}

double gating_loss(const VectorXd& predicted, const VectorXd& actual) {
  if (predicted.size() != actual.size())
    throw ShapeError("gating loss inputs are misaligned");
  return (actual - predicted).norm();
}

VectorXd gating_loss_grad(const VectorXd& predicted, const VectorXd& actual) {
  const double l = gating_loss(predicted, actual);
  if (l < 1e-12) return VectorXd::Zero(predicted.size());
  return (predicted - actual) / l;
}

double total_loss(double l_policy, double l_value, double l_adapter,
                  double adapter_weight) {
  if (!std::isfinite(l_policy) || !std::isfinite(l_value) ||
      !std::isfinite(l_adapter))
    throw NumericError("non-finite loss component");
  return l_policy + l_value + adapter_weight * l_adapter;
}

bool stagnation_check(const std::vector<double>& history, int window,
                      double delta) {
  const int n = static_cast<int>(history.size());
  if (n < 2 * window) return false;  // needs two full windows of evidence
  auto mean_of = [&](int first, int count) {
    return std::accumulate(history.begin() + first,
                           history.begin() + first + count, 0.0) /
           count;
  };
  const double recent = mean_of(n - window, window);
  const double previous = mean_of(n - 2 * window, window);
  const double improvement =
      (recent - previous) / std::max(std::abs(previous), 1e-8);
  return improvement < delta;
}

void write_curves_csv(const std::vector<IterationMetrics>& rows,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write curves csv: " + path);
  out << "iteration,wall_s,mean_r_track,mean_r_total,success_rate,"
         "mean_episode_s,active_expert,beta,loss_policy,loss_value,"
         "loss_adapter,loss_gating,loss_total,steps,episodes,"
         "expert_activated\n";
  out.precision(10);
  for (const IterationMetrics& m : rows) {
    out << m.iteration << ',' << m.wall_s << ',' << m.mean_r_track << ','
        << m.mean_r_total << ',' << m.success_rate << ',' << m.mean_episode_s
        << ',' << m.active_expert << ',' << m.beta << ',' << m.loss_policy
        << ',' << m.loss_value << ',' << m.loss_adapter << ','
        << m.loss_gating << ',' << m.loss_total << ',' << m.steps << ','
        << m.episodes << ',' << (m.expert_activated ? 1 : 0) << '\n';
  }
}

// ---- Trainer ----

Trainer::Trainer(const phys::World* world, motion::ClipLibrary* library,
                 policy::PolicyState* policy, TrainerConfig cfg,
                 env::EnvConfig env_cfg, std::uint64_t seed)
    : world_(world),
      library_(library),
      policy_(policy),
      cfg_(cfg),
      env_(world, env_cfg),
      norm_(env_.feature_dim()),
      rng_(seed) {
  cfg_.validate();
  if (library_->empty()) throw InputError("trainer needs a nonempty library");
  if (policy_->config.input_dim != env_.feature_dim() ||
      policy_->config.action_dim != env_.action_dim())
    throw ShapeError("policy dimensions do not match the environment");
  rebuild_optimizers();
}

void Trainer::rebuild_optimizers() {
  std::unordered_set<nn::Tensor*> gating;
  for (nn::MlpNet& head : policy_->gating_heads)
    for (nn::Tensor* t : head.params()) gating.insert(t);

  std::vector<nn::Tensor*> policy_params;
  for (nn::Tensor* t : policy::trainable_params(*policy_))
    if (!gating.count(t)) policy_params.push_back(t);
  nn::AdamConfig pc;
  pc.lr = cfg_.learning_rate;
  opt_ = nn::Adam(std::move(policy_params), pc);

  std::vector<nn::Tensor*> gating_params;
  for (nn::Tensor* t : policy_->gating_heads[policy_->active].params())
    gating_params.push_back(t);
  nn::AdamConfig gc;
  gc.lr = cfg_.gating_learning_rate;
  gating_opt_ = nn::Adam(std::move(gating_params), gc);
}

double Trainer::collect_rollouts(RolloutBuffer& buf, IterationMetrics& m) {
  const VectorXd probs =
      sampling_probs(*library_, cfg_.strategy, cfg_.temperature);
  const int chars = world_->num_characters();

  auto draw_clip = [&]() {
    const double u = rng_.uniform();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size() - 1);
  };
  auto draw_start = [&](int clip_idx) {
    const int fc = library_->clip(clip_idx).frame_count();
    if (!env_.config().randomize_start_frame || fc <= 2) return 0;
    return static_cast<int>(rng_.uniform_index(fc - 2));
  };

  const bool routing = cfg_.pss_enabled &&
                       policy_->config.variant ==
                           policy::Variant::kProgressive &&
                       policy_->active >= 1;
  double beta_sum = 0.0;
  int beta_rounds = 0;
  double conf_sum = 0.0;
  long conf_count = 0;
  double track_sum = 0.0, total_sum = 0.0;
  long reward_count = 0;
  long episode_frames = 0;
  int successes = 0;

  auto run_episode = [&](int clip_idx, int start_frame) {
    const motion::MotionClip& clip = library_->clip(clip_idx);
    std::vector<VectorXd> raw = env_.reset_at(&clip, start_frame);
    // per-character transition sequences, appended to buf at episode end
    std::vector<RolloutBuffer> seq(chars);
    bool terminated = false;
    double ep_track = 0.0;
    long ep_steps = 0;
    std::vector<double> final_bootstrap(chars, 0.0);
    while (true) {
      std::vector<VectorXd> feats(chars), actions(chars);
      for (int c = 0; c < chars; ++c) {
        norm_.update(raw[c]);
        feats[c] = norm_.normalize(raw[c]);
        if (env_.config().perturbation.mode == env::PerturbationMode::kNoise)
          env::apply_observation_noise(
              feats[c], env_.observation_dim(),
              env_.config().perturbation.noise_scale, rng_);
      }
      for (int c = 0; c < chars; ++c) {
        policy::ActionSample s = policy::sample_action(*policy_, feats[c], rng_);
        const double v = policy::value_estimate(*policy_, feats[c]);
        const VectorXd conf = policy::gating_confidence(*policy_, feats[c]);
        conf_sum += conf[policy_->active];
        ++conf_count;
        actions[c] = s.action;
        seq[c].features.push_back(feats[c]);
        seq[c].actions.push_back(s.action);
        seq[c].log_probs.push_back(s.log_prob);
        seq[c].values.push_back(v);
        seq[c].clip_ids.push_back(clip_idx);
        seq[c].expert_ids.push_back(policy_->active);
        seq[c].confidences.push_back(conf);
      }
      env::EnvStepResult res = env_.step(actions, rng_);
      ++ep_steps;
      const bool done = res.status != env::StepStatus::kContinue;
      for (int c = 0; c < chars; ++c) {
        seq[c].rewards.push_back(res.rewards[c]);
        seq[c].dones.push_back(done ? 1 : 0);
        seq[c].bootstrap.push_back(0.0);
        ep_track += res.rewards[c].r_track;
        total_sum += res.rewards[c].r_total;
        ++reward_count;
      }
      if (done) {
        terminated = res.status == env::StepStatus::kTerminated;
        if (!terminated)
          for (int c = 0; c < chars; ++c)
            final_bootstrap[c] = policy::value_estimate(
                *policy_, norm_.normalize(res.features[c]));
        break;
      }
      raw = res.features;
    }
    for (int c = 0; c < chars; ++c) {
      seq[c].bootstrap.back() = final_bootstrap[c];
      buf.features.insert(buf.features.end(), seq[c].features.begin(),
                          seq[c].features.end());
      buf.actions.insert(buf.actions.end(), seq[c].actions.begin(),
                         seq[c].actions.end());
      buf.log_probs.insert(buf.log_probs.end(), seq[c].log_probs.begin(),
                           seq[c].log_probs.end());
      buf.values.insert(buf.values.end(), seq[c].values.begin(),
                        seq[c].values.end());
      buf.rewards.insert(buf.rewards.end(), seq[c].rewards.begin(),
                         seq[c].rewards.end());
      buf.dones.insert(buf.dones.end(), seq[c].dones.begin(),
                       seq[c].dones.end());
      buf.bootstrap.insert(buf.bootstrap.end(), seq[c].bootstrap.begin(),
                           seq[c].bootstrap.end());
      buf.clip_ids.insert(buf.clip_ids.end(), seq[c].clip_ids.begin(),
                          seq[c].clip_ids.end());
      buf.expert_ids.insert(buf.expert_ids.end(), seq[c].expert_ids.begin(),
                            seq[c].expert_ids.end());
      buf.confidences.insert(buf.confidences.end(), seq[c].confidences.begin(),
                             seq[c].confidences.end());
    }
    track_sum += ep_track;
    episode_frames += ep_steps;
    const bool success = !terminated;
    if (success) ++successes;
    library_->record_episode(
        clip_idx, ep_track / static_cast<double>(chars * ep_steps), success);
    ++m.episodes;
  };

  while (buf.size() < static_cast<std::size_t>(cfg_.rollout_steps)) {
    if (routing) {
      // rank candidate episode starts by the predecessor head's confidence
      const int n = cfg_.routing_candidates;
      std::vector<EpisodeCandidate> cands(n);
      VectorXd prev_conf(n);
      double r_active = 0.0, r_prev = 0.0;
      for (int i = 0; i < n; ++i) {
        cands[i].clip = draw_clip();
        cands[i].start_frame = draw_start(cands[i].clip);
        const motion::MotionClip& clip = library_->clip(cands[i].clip);
        std::vector<VectorXd> raw = env_.reset_at(&clip, cands[i].start_frame);
        double ca = 0.0, cp = 0.0;
        for (const VectorXd& f : raw) {
          const VectorXd conf =
              policy::gating_confidence(*policy_, norm_.normalize(f));
          ca += conf[policy_->active];
          cp += conf[policy_->active - 1];
        }
        r_active += ca / raw.size();
        cands[i].confidence = cp / raw.size();
        prev_conf[i] = cands[i].confidence;
        r_prev += cands[i].confidence;
      }
      r_active /= n;
      r_prev /= n;
      policy::RoutingDecision d = policy::select_routed(
          prev_conf,
          policy::routing_fraction(r_active, r_prev,
                                   policy_->config.literal_routing));
      beta_sum += d.beta;
      ++beta_rounds;
      for (int idx : d.selected)
        run_episode(cands[idx].clip, cands[idx].start_frame);
    } else {
      const int clip_idx = draw_clip();
      run_episode(clip_idx, draw_start(clip_idx));
    }
  }

  m.steps = static_cast<int>(buf.size());
  m.mean_r_track = track_sum / reward_count;
  m.mean_r_total = total_sum / reward_count;
  m.success_rate = static_cast<double>(successes) / m.episodes;
  m.mean_episode_s =
      static_cast<double>(episode_frames) / m.episodes /
      world_->config().control_rate;
  m.beta = beta_rounds > 0 ? beta_sum / beta_rounds : 1.0;
  m.active_expert = policy_->active;
  return conf_count > 0 ? conf_sum / conf_count : 0.0;
}

void Trainer::update_policy(RolloutBuffer& buf, IterationMetrics& m) {
  compute_gae(buf, cfg_.gamma, cfg_.lambda);
  const VectorXd adv = normalize_advantages(buf.advantages);
  const Eigen::Index n = static_cast<Eigen::Index>(buf.size());
  const int in_dim = policy_->config.input_dim;
  const int a_dim = policy_->config.action_dim;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  double lp_sum = 0.0, lv_sum = 0.0, la_sum = 0.0;
  int batches = 0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    // Fisher-Yates with the trainer's own rng for determinism
    for (Eigen::Index i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng_.uniform_index(i + 1)]);
    for (Eigen::Index begin = 0; begin < n; begin += cfg_.minibatch_size) {
      const int mb =
          static_cast<int>(std::min<Eigen::Index>(cfg_.minibatch_size,
                                                  n - begin));
      MatrixXd x(in_dim, mb), a(a_dim, mb);
      VectorXd old_lp(mb), mb_adv(mb), targets(mb);
      for (int i = 0; i < mb; ++i) {
        const int j = order[begin + i];
        x.col(i) = buf.features[j];
        a.col(i) = buf.actions[j];
        old_lp[i] = buf.log_probs[j];
        mb_adv[i] = adv[j];
        targets[i] = buf.returns[j];
      }

      opt_.zero_grad();

      policy::PolicyCache cache;
      const MatrixXd mean = policy::compose_mean(*policy_, x, &cache);
      nn::Tensor& log_std = policy_->experts[policy_->active].log_std;
      const VectorXd sigma = log_std.value.col(0).array().exp();
      const VectorXd inv_var = sigma.array().square().inverse();

      VectorXd new_lp(mb);
      const double norm_const =
          -0.5 * a_dim * std::log(2.0 * M_PI) - log_std.value.sum();
      for (int i = 0; i < mb; ++i) {
        const VectorXd z = (a.col(i) - mean.col(i)).array() / sigma.array();
        new_lp[i] = norm_const - 0.5 * z.squaredNorm();
      }

      MatrixXd dmean = MatrixXd::Zero(a_dim, mb);
      VectorXd dlog_std = VectorXd::Zero(a_dim);
      double surr = 0.0;
      for (int i = 0; i < mb; ++i) {
        const double ratio = std::exp(new_lp[i] - old_lp[i]);
        const double clipped =
            std::clamp(ratio, 1.0 - cfg_.clip_eps, 1.0 + cfg_.clip_eps);
        const double unclipped_term = ratio * mb_adv[i];
        const double clipped_term = clipped * mb_adv[i];
        surr += std::min(unclipped_term, clipped_term);
        if (unclipped_term <= clipped_term) {
          // gradient flows only while the unclipped branch is active
          const double coef = -unclipped_term / mb;
          const VectorXd diff = a.col(i) - mean.col(i);
          dmean.col(i) = coef * (diff.array() * inv_var.array()).matrix();
          dlog_std +=
              coef *
              ((diff.array().square() * inv_var.array()) - 1.0).matrix();
        }
      }
      const double l_policy = -surr / mb;
      policy::backward_mean(*policy_, cache, dmean);
      log_std.grad += dlog_std;
      if (cfg_.entropy_coef > 0.0)
        log_std.grad.array() -= cfg_.entropy_coef;

      nn::ForwardCache vcache;
      const MatrixXd v = policy_->critic.forward(x, &vcache);
      const VectorXd verr = v.row(0).transpose() - targets;
      const double l_value = verr.squaredNorm() / mb;
      policy_->critic.backward(vcache, (2.0 / mb) * verr.transpose());

      const double l_adapter =
          adapter_loss(*policy_, true, cfg_.adapter_weight);

      opt_.step();

      lp_sum += l_policy;
      lv_sum += l_value;
      la_sum += l_adapter;
      ++batches;
    }
  }
  m.loss_policy = lp_sum / batches;
  m.loss_value = lv_sum / batches;
  m.loss_adapter = la_sum / batches;
  m.loss_total = total_loss(m.loss_policy, m.loss_value, m.loss_adapter,
                            cfg_.adapter_weight);
}

void Trainer::update_gating(RolloutBuffer& buf, IterationMetrics& m) {
  const Eigen::Index n = static_cast<Eigen::Index>(buf.size());
  const int in_dim = policy_->config.input_dim;
  nn::MlpNet& head = policy_->gating_heads[policy_->active];

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  int batches = 0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    for (Eigen::Index i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng_.uniform_index(i + 1)]);
    for (Eigen::Index begin = 0; begin < n; begin += cfg_.minibatch_size) {
      const int mb =
          static_cast<int>(std::min<Eigen::Index>(cfg_.minibatch_size,
                                                  n - begin));
      MatrixXd x(in_dim, mb);
      VectorXd actual(mb);
      for (int i = 0; i < mb; ++i) {
        const int j = order[begin + i];
        x.col(i) = buf.features[j];
        actual[i] = std::clamp(buf.rewards[j].r_track, 0.0, 1.0);
      }
      gating_opt_.zero_grad();
      nn::ForwardCache cache;
      const MatrixXd logits = head.forward(x, &cache);
      const VectorXd pred =
          logits.row(0).transpose().array().logistic().matrix();
      loss_sum += gating_loss(pred, actual);
      ++batches;
      const VectorXd dpred = gating_loss_grad(pred, actual);
      const VectorXd dlogit =
          (dpred.array() * pred.array() * (1.0 - pred.array())).matrix();
      head.backward(cache, dlogit.transpose());
      gating_opt_.step();
    }
  }
  m.loss_gating = loss_sum / batches;
}

IterationMetrics Trainer::iterate() {
  const auto t0 = std::chrono::steady_clock::now();
  IterationMetrics m;
  m.iteration = iteration_;

  RolloutBuffer buf;
  const double mean_conf = collect_rollouts(buf, m);
  buf.check_aligned();
  update_policy(buf, m);
  update_gating(buf, m);

  conf_history_.push_back(mean_conf);
  const bool can_grow =
      policy_->config.variant == policy::Variant::kProgressive &&
      policy_->expert_count() <
          std::min(cfg_.max_experts, policy_->config.max_experts);
  if (can_grow && stagnation_check(conf_history_, cfg_.stagnation_window,
                                   cfg_.stagnation_delta)) {
    policy::activate_expert(*policy_, rng_);
    rebuild_optimizers();
    conf_history_.clear();
    m.expert_activated = true;
  }

  ++iteration_;
  m.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                           t0)
                 .count();
  return m;
}

}  // namespace pmoe::trainer
