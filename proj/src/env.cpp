#include "pmoe/env.hpp"

#include <cmath>
#include <fstream>

#include "pmoe/errors.hpp"

namespace pmoe::env {

using motion::CharacterFrame;

VectorXd HumanoidState::flatten() const {
  const int B = static_cast<int>(local_pos.size());
  VectorXd out(B * 4);
  for (int i = 0; i < B; ++i) {
    out[2 * i] = local_pos[i].x;
    out[2 * i + 1] = local_pos[i].y;
    out[2 * B + 2 * i] = local_vel[i].x;
    out[2 * B + 2 * i + 1] = local_vel[i].y;
  }
  return out;
}

VectorXd GoalState::flatten() const {
  const int B = static_cast<int>(dpos.size());
  const int J = static_cast<int>(joint_pos.size());
  VectorXd out(B * 6 + J * 2);
  int at = 0;
  for (int i = 0; i < B; ++i) {
    out[at++] = dpos[i].x;
    out[at++] = dpos[i].y;
  }
  out.segment(at, B) = dheading;
  at += B;
  for (int i = 0; i < B; ++i) {
    out[at++] = dvel[i].x;
    out[at++] = dvel[i].y;
  }
  out.segment(at, B) = dangvel;
  at += B;
  out.segment(at, J) = joint_pos;
  at += J;
  out.segment(at, J) = joint_vel;
  return out;
}

HumanoidState observe(const phys::World& world, const phys::SimState& s,
                      int character) {
  const phys::Transform2 t = world.local_frame(s, character);
  const int B = world.model().body_count();
  HumanoidState h;
  h.local_pos.reserve(B);
  h.local_vel.reserve(B);
  for (int i = 0; i < B; ++i) {
    const phys::BodyState& b = s.bodies[world.body_id(character, i)];
    h.local_pos.push_back(t.to_local_point(b.pos));
    h.local_vel.push_back(t.to_local_vector(b.vel));
  }
  return h;
}

GoalState goal_features(const phys::World& world, const phys::SimState& s,
                        const MotionClip& clip, int target_frame,
                        int character) {
  if (target_frame < 0 || target_frame >= clip.frame_count())
    throw InputError("goal_features: target frame out of range");
  const phys::Transform2 t = world.local_frame(s, character);
  const CharacterFrame& f = clip.frames[target_frame][character];
  const int B = world.model().body_count();
  GoalState g;
  g.dpos.reserve(B);
  g.dvel.reserve(B);
  g.dheading.resize(B);
  g.dangvel.resize(B);
  for (int i = 0; i < B; ++i) {
    const phys::BodyState& b = s.bodies[world.body_id(character, i)];
    g.dpos.push_back(t.to_local_vector(f.body_pos[i] - b.pos));
    // sign convention: positive when the simulated heading is ahead of target
    g.dheading[i] = wrap_angle(b.angle - f.body_heading[i]);
    g.dvel.push_back(t.to_local_vector(f.body_vel[i] - b.vel));
    g.dangvel[i] = f.body_ang_vel[i] - b.omega;
  }
  g.joint_pos = f.joint_angles;
  g.joint_vel = f.joint_rates;
  return g;
}

RewardBreakdown tracking_reward(const phys::World& world,
                                const phys::SimState& s, const MotionClip& clip,
                                int frame, int character,
                                const RewardParams& params) {
  if (frame < 0 || frame >= clip.frame_count())
    throw InputError("tracking_reward: frame out of range");
  const CharacterFrame& f = clip.frames[frame][character];
  const int B = world.model().body_count();
  const int J = world.model().joint_count();

  double mse_p = 0.0, mse_q = 0.0, mse_v = 0.0, mse_a = 0.0;
  for (int i = 0; i < B; ++i) {
    const phys::BodyState& b = s.bodies[world.body_id(character, i)];
    mse_p += (f.body_pos[i] - b.pos).squared_norm();
    const double dq = wrap_angle(f.body_heading[i] - b.angle);
    mse_q += dq * dq;
    mse_v += (f.body_vel[i] - b.vel).squared_norm();
    const double da = f.body_ang_vel[i] - b.omega;
    mse_a += da * da;
  }
  mse_p /= B;
  mse_q /= B;
  mse_v /= B;
  mse_a /= B;

  double mse_jp = 0.0, mse_jv = 0.0;
  const VectorXd& q = s.chars[character].q;
  const VectorXd& qd = s.chars[character].qd;
  for (int j = 0; j < J; ++j) {
    const double dp = wrap_angle(f.joint_angles[j] - q[3 + j]);
    mse_jp += dp * dp;
    const double dv = f.joint_rates[j] - qd[3 + j];
    mse_jv += dv * dv;
  }
  if (J > 0) {
    mse_jp /= J;
    mse_jv /= J;
  }

  RewardBreakdown r;
  r.rp = std::exp(-params.alpha[0] * mse_p);
  r.rq = std::exp(-params.alpha[1] * mse_q);
  r.rv = std::exp(-params.alpha[2] * mse_v);
  r.ra = std::exp(-params.alpha[3] * mse_a);
  r.rjp = std::exp(-params.alpha[4] * mse_jp);
  r.rjv = std::exp(-params.alpha[5] * mse_jv);
  r.r_track = params.weights[0] * r.rp + params.weights[1] * r.rq +
              params.weights[2] * r.rv + params.weights[3] * r.ra +
              params.weights[4] * r.rjp + params.weights[5] * r.rjv;
  r.r_total = r.r_track;  // caller folds in the energy term
  return r;
}

double total_reward(double r_track, double r_energy) {
  return r_track + 0.5 * r_energy;
}

double energy_reward(const VectorXd& torques, const VectorXd& joint_rates,
                     double scale) {
  if (torques.size() != joint_rates.size())
    throw ShapeError("energy_reward: torque/rate length mismatch");
  if (torques.size() == 0) return 0.0;
  return -scale * torques.cwiseProduct(joint_rates).cwiseAbs().mean();
}

double mean_body_error(const phys::World& world, const phys::SimState& s,
                       const MotionClip& clip, int frame, int character) {
  const CharacterFrame& f = clip.frames.at(frame)[character];
  const int B = world.model().body_count();
  double err = 0.0;
  for (int i = 0; i < B; ++i)
    err += (f.body_pos[i] - s.bodies[world.body_id(character, i)].pos).norm();
  return err / B;
}

StepStatus check_termination(const phys::World& world, const phys::SimState& s,
                             const MotionClip& clip, int frame,
                             const EnvConfig& cfg, int steps_taken) {
  for (int c = 0; c < world.num_characters(); ++c)
    if (mean_body_error(world, s, clip, frame, c) > cfg.termination_threshold)
      return StepStatus::kTerminated;
  if (frame >= clip.frame_count() - 1 || steps_taken >= cfg.max_episode_steps)
    return StepStatus::kTruncated;
  return StepStatus::kContinue;
}

void apply_perturbations(const phys::World& world, phys::SimState& s,
                         const PerturbationConfig& cfg, Rng& rng,
                         double* next_throw_time) {
  if (cfg.mode != PerturbationMode::kObject) return;
  if (s.time < *next_throw_time) return;
  *next_throw_time = s.time + cfg.throw_interval;

  const double mass = cfg.object_masses[rng.uniform_index(
      cfg.object_masses.size())];
  const int character = static_cast<int>(rng.uniform_index(
      static_cast<std::size_t>(world.num_characters())));
  const int body = static_cast<int>(rng.uniform_index(
      static_cast<std::size_t>(world.model().body_count())));
  const Vec2 target = s.bodies[world.body_id(character, body)].pos;

  const double radius = 0.1;
  // launch from a random bearing in the upper half plane, 2 m out
  const double bearing = rng.uniform(0.25 * std::numbers::pi,
                                     0.75 * std::numbers::pi);
  const Vec2 offset = {2.0 * std::cos(bearing), 2.0 * std::sin(bearing)};
  const Vec2 spawn = target + offset;
  const Vec2 dir = (target - spawn) * (1.0 / (target - spawn).norm());

  phys::Projectile p;
  p.def = {"thrown", mass, 0.5 * mass * radius * radius, 0.0, radius};
  p.state.pos = spawn;
  p.state.vel = dir * cfg.throw_speed;
  s.projectiles.push_back(p);
  world.refresh_body_states(s);
}

void apply_observation_noise(VectorXd& features, int obs_dim, double sigma,
                             Rng& rng) {
  if (sigma <= 0.0) return;
  for (int i = 0; i < obs_dim && i < features.size(); ++i)
    features[i] += sigma * rng.normal();
}

RunningNorm::RunningNorm(Eigen::Index dim)
    : mean_(VectorXd::Zero(dim)), m2_(VectorXd::Zero(dim)) {}

void RunningNorm::update(const VectorXd& x) {
  if (x.size() != mean_.size())
    throw ShapeError("running norm: dimension mismatch");
  count_ += 1.0;
  const VectorXd delta = x - mean_;
  mean_ += delta / count_;
  m2_ += delta.cwiseProduct(x - mean_);
}

VectorXd RunningNorm::std() const {
  if (count_ < 2.0) return VectorXd::Ones(mean_.size());
  return (m2_ / count_).cwiseMax(1e-8).cwiseSqrt();
}

VectorXd RunningNorm::normalize(const VectorXd& x) const {
  if (x.size() != mean_.size())
    throw ShapeError("running norm: dimension mismatch");
  if (count_ < 2.0) return x;
  return (x - mean_).cwiseQuotient(std());
}

void RunningNorm::merge(const RunningNorm& other) {
  if (other.count_ == 0.0) return;
  if (count_ == 0.0) {
    *this = other;
    return;
  }
  if (other.mean_.size() != mean_.size())
    throw ShapeError("running norm: merge dimension mismatch");
  const double total = count_ + other.count_;
  const VectorXd delta = other.mean_ - mean_;
  mean_ += delta * (other.count_ / total);
  m2_ += other.m2_ +
         delta.cwiseProduct(delta) * (count_ * other.count_ / total);
  count_ = total;
}

void RunningNorm::restore(double count, VectorXd mean, VectorXd m2) {
  count_ = count;
  mean_ = std::move(mean);
  m2_ = std::move(m2);
}

TrackingEnv::TrackingEnv(const phys::World* world, EnvConfig cfg)
    : world_(world), cfg_(cfg) {}

int TrackingEnv::observation_dim() const {
  return world_->model().body_count() * 4;
}

int TrackingEnv::feature_dim() const {
  const int B = world_->model().body_count();
  const int J = world_->model().joint_count();
  return B * 4 + B * 6 + J * 2;
}

int TrackingEnv::action_dim() const { return world_->model().joint_count(); }

std::vector<VectorXd> TrackingEnv::gather_features() const {
  std::vector<VectorXd> out;
  const int goal_frame =
      std::min(frame_ + 1, clip_->frame_count() - 1);
  for (int c = 0; c < world_->num_characters(); ++c) {
    const HumanoidState h = observe(*world_, sim_, c);
    const GoalState g = goal_features(*world_, sim_, *clip_, goal_frame, c);
    VectorXd f(feature_dim());
    f << h.flatten(), g.flatten();
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<VectorXd> TrackingEnv::reset(const MotionClip* clip, Rng& rng) {
  int start = 0;
  if (cfg_.randomize_start_frame && clip->frame_count() > 2)
    start = static_cast<int>(rng.uniform_index(
        static_cast<std::size_t>(clip->frame_count() - 2)));
  return reset_at(clip, start);
}

std::vector<VectorXd> TrackingEnv::reset_at(const MotionClip* clip,
                                            int start_frame) {
  if (start_frame < 0 || start_frame >= clip->frame_count())
    throw InputError("reset: start frame out of range");
  clip_ = clip;
  sim_ = world_->init_state();
  sim_.projectiles.clear();
  frame_ = start_frame;
  for (int c = 0; c < world_->num_characters(); ++c)
    motion::pose_from_frame(clip_->frames[frame_][c], sim_.chars[c]);
  world_->refresh_body_states(sim_);
  steps_ = 0;
  next_throw_ = sim_.time + cfg_.perturbation.throw_interval;
  return gather_features();
}

EnvStepResult TrackingEnv::step(const std::vector<VectorXd>& actions, Rng& rng) {
  if (!clip_) throw InputError("env step before reset");
  const int chars = world_->num_characters();
  const int J = action_dim();
  if (static_cast<int>(actions.size()) != chars)
    throw ShapeError("env step: one action vector per character required");

  const int target_frame = std::min(frame_ + 1, clip_->frame_count() - 1);
  VectorXd targets(chars * J);
  for (int c = 0; c < chars; ++c) {
    if (actions[c].size() != J)
      throw ShapeError("env step: action dimension mismatch");
    if (cfg_.action_mode == ActionMode::kResidual)
      targets.segment(c * J, J) =
          clip_->frames[target_frame][c].joint_angles + actions[c];
    else
      targets.segment(c * J, J) = actions[c];
  }

  apply_perturbations(*world_, sim_, cfg_.perturbation, rng, &next_throw_);

  std::vector<double> power(chars, 0.0);
  world_->step_targets(sim_, targets, &power);
  ++steps_;
  frame_ = target_frame;

  EnvStepResult out;
  out.contact_count = static_cast<int>(sim_.contacts.size());
  for (int c = 0; c < chars; ++c) {
    RewardBreakdown r =
        tracking_reward(*world_, sim_, *clip_, frame_, c, reward_params_);
    r.r_energy = -reward_params_.energy_scale * power[c];
    r.r_total = total_reward(r.r_track, r.r_energy);
    out.rewards.push_back(r);
    out.mean_error = std::max(
        out.mean_error, mean_body_error(*world_, sim_, *clip_, frame_, c));
  }
  out.status = check_termination(*world_, sim_, *clip_, frame_, cfg_, steps_);
  out.features = gather_features();
  return out;
}

void write_episode_csv(const std::vector<EpisodeRow>& rows, int characters,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write episode csv: " + path);
  out << "time";
  for (int c = 0; c < characters; ++c)
    out << ",r_track_" << c << ",r_energy_" << c << ",r_total_" << c;
  out << ",mean_body_error,contact_count,terminated\n";
  out.precision(10);
  for (const EpisodeRow& row : rows) {
    out << row.time;
    for (int c = 0; c < characters; ++c) {
      const RewardBreakdown& r = row.rewards.at(c);
      out << ',' << r.r_track << ',' << r.r_energy << ',' << r.r_total;
    }
    out << ',' << row.mean_error << ',' << row.contact_count << ','
        << (row.terminated ? 1 : 0) << '\n';
  }
}

}  // namespace pmoe::env
