#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pmoe/checkpoint.hpp"
#include "pmoe/errors.hpp"
#include "pmoe/config.hpp"
#include "pmoe/eval.hpp"
#include "pmoe/motion.hpp"
#include "pmoe/trainer.hpp"

namespace py = pybind11;
using namespace pmoe;

namespace {

phys::World default_world() {
  return phys::World(phys::default_character(), 2, phys::SimConfig{});
}

motion::ClipLibrary load_library(const phys::World& world,
                                 const std::vector<std::string>& paths) {
  motion::ClipLibrary lib;
  for (const std::string& p : paths) {
    motion::MotionClip clip = motion::load_clip(p);
    if (clip.bodies != world.model().body_count() ||
        clip.joints != world.model().joint_count())
      throw InputError("clip " + p + " does not match the character model");
    lib.add(std::move(clip));
  }
  return lib;
}

py::dict metrics_dict(const trainer::IterationMetrics& m) {
  py::dict d;
  d["iteration"] = m.iteration;
  d["mean_r_track"] = m.mean_r_track;
  d["mean_r_total"] = m.mean_r_total;
  d["success_rate"] = m.success_rate;
  d["mean_episode_s"] = m.mean_episode_s;
  d["active_expert"] = m.active_expert;
  d["beta"] = m.beta;
  d["loss_policy"] = m.loss_policy;
  d["loss_value"] = m.loss_value;
  d["loss_adapter"] = m.loss_adapter;
  d["loss_gating"] = m.loss_gating;
  d["loss_total"] = m.loss_total;
  d["steps"] = m.steps;
  d["episodes"] = m.episodes;
  d["expert_activated"] = m.expert_activated;
  return d;
}

}  // namespace

PYBIND11_MODULE(pmoepy, m) {
  m.doc() = "physics-based two-character motion tracking";

  m.def("scenario_names",
        []() { return motion::scenario_names(); });

  m.def(
      "generate_clip",
      [](const std::string& scenario, double duration, std::uint64_t seed,
         const std::string& out) {
        phys::World world = default_world();
        motion::MotionClip clip =
            motion::generate_reference_scenario(world, scenario, duration,
                                                seed);
        motion::save_clip(clip, out);
        return clip.frame_count();
      },
      py::arg("scenario"), py::arg("duration"), py::arg("seed"),
      py::arg("out"));

  m.def("clip_info", [](const std::string& path) {
    const motion::MotionClip clip = motion::load_clip(path);
    py::dict d;
    d["id"] = clip.id;
    d["fps"] = clip.fps;
    d["frames"] = clip.frame_count();
    d["characters"] = clip.characters;
    d["bodies"] = clip.bodies;
    d["joints"] = clip.joints;
    d["duration"] = clip.duration();
    return d;
  });

  m.def("clips_equal", [](const std::string& a, const std::string& b) {
    return motion::load_clip(a) == motion::load_clip(b);
  });

  m.def("replay_deviation", [](const std::string& path) {
    phys::World world = default_world();
    return motion::replay_deviation(world, motion::load_clip(path));
  });

  m.def(
      "routing_fraction",
      [](double r_k, double r_prev, bool literal) {
        return policy::routing_fraction(r_k, r_prev, literal);
      },
      py::arg("r_k"), py::arg("r_prev"), py::arg("literal") = false);

  m.def(
      "tracking_reward_sampling_probs",
      [](const std::vector<double>& mean_rewards, double temperature) {
        motion::ClipLibrary lib;
        for (std::size_t i = 0; i < mean_rewards.size(); ++i) {
          motion::MotionClip clip;
          clip.id = std::to_string(i);
          clip.frames.resize(2, std::vector<motion::CharacterFrame>(2));
          lib.add(clip);
          lib.stats(i).mean_track_reward = mean_rewards[i];
          lib.stats(i).initialized = true;
        }
        const Eigen::VectorXd p = trainer::sampling_probs(
            lib, trainer::SamplingStrategy::kTrackingReward, temperature);
        return std::vector<double>(p.data(), p.data() + p.size());
      },
      py::arg("mean_rewards"), py::arg("temperature"));

  m.def(
      "gae",
      [](const std::vector<double>& rewards, const std::vector<double>& values,
         const std::vector<bool>& dones, double gamma, double lambda) {
        trainer::RolloutBuffer buf;
        for (std::size_t i = 0; i < rewards.size(); ++i) {
          buf.features.push_back(Eigen::VectorXd::Zero(1));
          buf.actions.push_back(Eigen::VectorXd::Zero(1));
          buf.log_probs.push_back(0.0);
          buf.values.push_back(values.at(i));
          env::RewardBreakdown r;
          r.r_total = rewards[i];
          buf.rewards.push_back(r);
          buf.dones.push_back(dones.at(i) ? 1 : 0);
          buf.bootstrap.push_back(0.0);
          buf.clip_ids.push_back(0);
          buf.expert_ids.push_back(0);
          buf.confidences.push_back(Eigen::VectorXd::Zero(1));
        }
        trainer::compute_gae(buf, gamma, lambda);
        return std::vector<double>(buf.advantages.data(),
                                   buf.advantages.data() +
                                       buf.advantages.size());
      },
      py::arg("rewards"), py::arg("values"), py::arg("dones"),
      py::arg("gamma") = 0.99, py::arg("lambda") = 0.95);

  m.def(
      "train",
      [](const std::vector<std::string>& clips, int iterations,
         std::uint64_t seed, const std::string& checkpoint_out,
         const std::string& variant, int rollout_steps, int hidden) {
        phys::World world = default_world();
        motion::ClipLibrary lib = load_library(world, clips);
        env::EnvConfig ec;
        env::TrackingEnv probe(&world, ec);
        policy::PolicyConfig pc;
        pc.input_dim = probe.feature_dim();
        pc.action_dim = probe.action_dim();
        pc.hidden = hidden;
        pc.gating_hidden = 16;
        pc.critic_hidden = hidden;
        pc.variant = checkpoint::variant_from_name(variant);
        Rng rng(seed);
        policy::PolicyState pol = policy::make_policy(pc, rng);
        trainer::TrainerConfig tc;
        tc.rollout_steps = rollout_steps;
        tc.minibatch_size = std::min(64, rollout_steps);
        trainer::Trainer tr(&world, &lib, &pol, tc, ec, seed + 1);
        py::list rows;
        for (int i = 0; i < iterations; ++i)
          rows.append(metrics_dict(tr.iterate()));
        if (!checkpoint_out.empty()) {
          checkpoint::TrainerSnapshot snap;
          snap.iteration = tr.iteration();
          snap.confidence_history = tr.confidence_history();
          snap.norm_count = tr.normalizer().count();
          snap.norm_mean = tr.normalizer().mean();
          snap.norm_m2 = tr.normalizer().m2();
          snap.opt_step = tr.optimizer().step_count();
          snap.opt_states = tr.optimizer().states();
          snap.gating_step = tr.gating_optimizer().step_count();
          snap.gating_states = tr.gating_optimizer().states();
          for (std::size_t i = 0; i < lib.size(); ++i) {
            snap.clip_ids.push_back(lib.clip(i).id);
            snap.clip_stats.push_back(lib.stats(i));
          }
          checkpoint::save_checkpoint(checkpoint_out, pol, &snap);
        }
        return rows;
      },
      py::arg("clips"), py::arg("iterations") = 1, py::arg("seed") = 0,
      py::arg("checkpoint_out") = "", py::arg("variant") = "progressive",
      py::arg("rollout_steps") = 256, py::arg("hidden") = 32);

  m.def(
      "evaluate",
      [](const std::string& ckpt, const std::vector<std::string>& clips,
         int episodes, std::uint64_t seed) {
        phys::World world = default_world();
        motion::ClipLibrary lib = load_library(world, clips);
        checkpoint::TrainerSnapshot snap;
        policy::PolicyState pol = checkpoint::load_checkpoint(ckpt, &snap);
        env::TrackingEnv probe(&world, {});
        env::RunningNorm norm(probe.feature_dim());
        if (snap.norm_mean.size() == norm.dim())
          norm.restore(snap.norm_count, snap.norm_mean, snap.norm_m2);
        eval::EvalSettings settings;
        settings.episodes_per_clip = episodes;
        settings.seed = seed;
        settings.env.randomize_start_frame = false;
        eval::MetricsReport r =
            eval::run_evaluation(world, pol, norm, lib, settings);
        r.checkpoint = ckpt;
        return eval::report_to_json(r);
      },
      py::arg("checkpoint"), py::arg("clips"), py::arg("episodes") = 2,
      py::arg("seed") = 0);
}
