#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "pmoe/checkpoint.hpp"
#include "pmoe/config.hpp"
#include "pmoe/errors.hpp"
#include "pmoe/eval.hpp"
#include "pmoe/motion.hpp"
#include "pmoe/trainer.hpp"

namespace fs = std::filesystem;
using namespace pmoe;
using Eigen::VectorXd;

namespace {

constexpr int kOk = 0;
constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

phys::World make_world(const config::RunConfig& cfg) {
  phys::CharacterModel model = cfg.character_model.empty()
                                   ? phys::default_character()
                                   : phys::load_character_model(
                                         cfg.character_model);
  return phys::World(std::move(model), 2, cfg.sim);
}

motion::ClipLibrary load_library(const phys::World& world,
                                 const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no clips configured");
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

policy::PolicyState make_policy_for(const config::RunConfig& cfg,
                                    const phys::World& world, Rng& rng) {
  env::TrackingEnv probe(&world, cfg.env);
  policy::PolicyConfig pc;
  pc.input_dim = probe.feature_dim();
  pc.action_dim = probe.action_dim();
  pc.hidden = cfg.hidden;
  pc.gating_hidden = cfg.gating_hidden;
  pc.critic_hidden = cfg.critic_hidden;
  pc.max_experts = cfg.trainer.max_experts;
  pc.adapter_init_scale = cfg.adapter_init_scale;
  pc.log_std_init = cfg.log_std_init;
  pc.variant = checkpoint::variant_from_name(cfg.variant);
  pc.literal_routing = cfg.literal_routing;
  pc.baseline_experts = cfg.baseline_experts;
  return policy::make_policy(pc, rng);
}

checkpoint::TrainerSnapshot make_snapshot(trainer::Trainer& tr,
                                          const motion::ClipLibrary& lib) {
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
  return snap;
}

void restore_trainer(trainer::Trainer& tr, motion::ClipLibrary& lib,
                     const checkpoint::TrainerSnapshot& snap) {
  tr.set_iteration(snap.iteration);
  tr.confidence_history() = snap.confidence_history;
  if (snap.norm_mean.size() == tr.normalizer().dim())
    tr.normalizer().restore(snap.norm_count, snap.norm_mean, snap.norm_m2);
  if (snap.opt_states.size() == tr.optimizer().states().size()) {
    tr.optimizer().states() = snap.opt_states;
    tr.optimizer().set_step_count(snap.opt_step);
  }
  if (snap.gating_states.size() == tr.gating_optimizer().states().size()) {
    tr.gating_optimizer().states() = snap.gating_states;
    tr.gating_optimizer().set_step_count(snap.gating_step);
  }
  for (std::size_t i = 0; i < lib.size(); ++i)
    for (std::size_t k = 0; k < snap.clip_ids.size(); ++k)
      if (snap.clip_ids[k] == lib.clip(i).id) lib.stats(i) = snap.clip_stats[k];
}

int cmd_gendata(const std::string& scenario, double duration,
                std::uint64_t seed, const std::string& out) {
  phys::World world(phys::default_character(), 2, phys::SimConfig{});
  motion::MotionClip clip =
      motion::generate_reference_scenario(world, scenario, duration, seed);
  motion::save_clip(clip, out);
  std::cout << "wrote " << out << ": " << clip.frame_count() << " frames, "
            << motion::replay_contact_events(world, clip)
            << " contact events\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
  config::RunConfig cfg = config::load_run_config(config_path);
  phys::World world = make_world(cfg);
  motion::ClipLibrary lib = load_library(world, cfg.clips);
  fs::create_directories(cfg.output_dir);

  Rng rng(cfg.seed);
  policy::PolicyState pol;
  checkpoint::TrainerSnapshot snap;
  bool resumed = false;
  if (!resume.empty()) {
    pol = checkpoint::load_checkpoint(resume, &snap);
    resumed = true;
  } else {
    pol = make_policy_for(cfg, world, rng);
  }
  trainer::Trainer tr(&world, &lib, &pol, cfg.trainer, cfg.env,
                      cfg.seed + 1);
  if (resumed) restore_trainer(tr, lib, snap);

  const fs::path out_dir(cfg.output_dir);
  std::vector<trainer::IterationMetrics> curves;
  const int last = tr.iteration() + cfg.iterations;
  while (tr.iteration() < last) {
    trainer::IterationMetrics m = tr.iterate();
    curves.push_back(m);
    std::cout << "iter " << m.iteration << " r_track " << m.mean_r_track
              << " success " << m.success_rate << " expert "
              << m.active_expert << " beta " << m.beta << '\n';
    if (m.expert_activated) {
      checkpoint::TrainerSnapshot s = make_snapshot(tr, lib);
      checkpoint::save_checkpoint(
          (out_dir / ("expert_" + std::to_string(pol.active) + ".pmoe"))
              .string(),
          pol, &s);
    }
    trainer::write_curves_csv(curves, (out_dir / "curves.csv").string());
  }
  checkpoint::TrainerSnapshot s = make_snapshot(tr, lib);
  checkpoint::save_checkpoint((out_dir / "final.pmoe").string(), pol, &s);
  std::cout << "final checkpoint: " << (out_dir / "final.pmoe").string()
            << '\n';
  return kOk;
}

int cmd_eval(const std::string& ckpt_path,
             const std::vector<std::string>& clips, const std::string& perturb,
             const std::vector<double>& levels, int episodes,
             std::uint64_t seed, const std::string& out) {
  config::RunConfig cfg;  // defaults drive the world for evaluation
  phys::World world = make_world(cfg);
  motion::ClipLibrary lib = load_library(world, clips);
  checkpoint::TrainerSnapshot snap;
  policy::PolicyState pol = checkpoint::load_checkpoint(ckpt_path, &snap);

  env::TrackingEnv probe(&world, cfg.env);
  env::RunningNorm norm(probe.feature_dim());
  if (snap.norm_mean.size() == norm.dim())
    norm.restore(snap.norm_count, snap.norm_mean, snap.norm_m2);

  eval::EvalSettings settings;
  settings.episodes_per_clip = episodes;
  settings.seed = seed;
  settings.env = cfg.env;
  settings.env.randomize_start_frame = false;

  std::vector<eval::MetricsReport> reports;
  if (perturb.empty()) {
    reports.push_back(eval::run_evaluation(world, pol, norm, lib, settings));
  } else {
    if (levels.empty())
      throw InputError("--perturb requires --levels");
    reports =
        eval::run_perturbation_sweep(world, pol, norm, lib, settings, perturb,
                                     levels);
  }
  for (eval::MetricsReport& r : reports) {
    r.checkpoint = ckpt_path;
    std::cout << "perturbation " << r.perturbation_mode << " "
              << r.perturbation_level << ": success " << r.success_rate
              << ", mpjpe " << r.mpjpe_mm << " mm, episode "
              << r.mean_episode_s << " s\n";
  }
  if (!out.empty()) eval::write_report_json(reports, out);
  return kOk;
}

int cmd_replay(const std::string& ckpt_path, const std::string& clip_path,
               const std::string& out) {
  config::RunConfig cfg;
  phys::World world = make_world(cfg);
  motion::MotionClip clip = motion::load_clip(clip_path);
  const int chars = world.num_characters();
  const int B = world.model().body_count();
  const int J = world.model().joint_count();

  // policy-free replay runs the clip's stored PD target program
  policy::PolicyState pol;
  env::RunningNorm norm;
  const bool use_policy = !ckpt_path.empty();
  if (use_policy) {
    checkpoint::TrainerSnapshot snap;
    pol = checkpoint::load_checkpoint(ckpt_path, &snap);
    env::TrackingEnv probe(&world, cfg.env);
    norm = env::RunningNorm(probe.feature_dim());
    if (snap.norm_mean.size() == norm.dim())
      norm.restore(snap.norm_count, snap.norm_mean, snap.norm_m2);
  }

  std::ofstream csv(out);
  if (!csv) throw IoError("cannot write trajectory csv: " + out);
  csv << "time";
  for (int c = 0; c < chars; ++c)
    csv << ",root_x_" << c << ",root_y_" << c << ",root_heading_" << c
        << ",target_root_x_" << c << ",target_root_y_" << c
        << ",target_root_heading_" << c << ",mean_error_" << c;
  csv << ",contact_count,total_normal_force\n";
  csv.precision(10);

  env::EnvConfig ec = cfg.env;
  ec.randomize_start_frame = false;
  env::TrackingEnv environment(&world, ec);
  Rng rng(0);
  std::vector<VectorXd> raw = environment.reset_at(&clip, 0);
  int rows = 0;
  while (true) {
    std::vector<VectorXd> actions(chars);
    const int target_frame =
        std::min(environment.frame() + 1, clip.frame_count() - 1);
    for (int c = 0; c < chars; ++c) {
      if (use_policy) {
        actions[c] =
            policy::sample_action(pol, norm.normalize(raw[c]), rng, true)
                .action;
      } else {
        // stored program as a residual around the reference trajectory
        actions[c] = clip.frames[environment.frame()][c].pd_targets -
                     clip.frames[target_frame][c].joint_angles;
      }
    }
    env::EnvStepResult res = environment.step(actions, rng);

    const int f = environment.frame();
    double total_normal = 0.0;
    for (const phys::ContactPoint& cp : environment.sim().contacts)
      total_normal += cp.normal_force;
    csv << environment.sim().time;
    for (int c = 0; c < chars; ++c) {
      const phys::BodyState& root = environment.sim().bodies[c * B];
      const motion::CharacterFrame& ref = clip.frames[f][c];
      csv << ',' << root.pos.x << ',' << root.pos.y << ',' << root.angle << ','
          << ref.root_pos.x << ',' << ref.root_pos.y << ',' << ref.root_heading
          << ','
          << env::mean_body_error(world, environment.sim(), clip, f, c);
    }
    csv << ',' << res.contact_count << ',' << total_normal << '\n';
    ++rows;
    if (res.status != env::StepStatus::kContinue) break;
    raw = res.features;
  }
  (void)J;
  std::cout << "wrote " << out << ": " << rows << " rows\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-character motion tracking"};
  app.require_subcommand(1);

  auto* gendata = app.add_subcommand("gendata", "generate a reference clip");
  std::string scenario = "push";
  double duration = 4.0;
  std::uint64_t seed = 0;
  std::string out_path = "clip.mclp";
  gendata->add_option("--scenario", scenario, "scenario name");
  gendata->add_option("--duration", duration, "clip length in seconds");
  gendata->add_option("--seed", seed, "rng seed");
  gendata->add_option("--out", out_path, "output clip path");

  auto* train = app.add_subcommand("train", "train a tracking policy");
  std::string config_path;
  std::string resume;
  train->add_option("--config", config_path, "run config path")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt;
  std::vector<std::string> clips;
  std::string perturb;
  std::vector<double> levels;
  int episodes = 4;
  std::uint64_t eval_seed = 0;
  std::string report_path;
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--clips", clips, "clip paths")->required();
  eval_cmd->add_option("--perturb", perturb, "object | noise");
  eval_cmd->add_option("--levels", levels, "perturbation levels")
      ->delimiter(',');
  eval_cmd->add_option("--episodes", episodes, "episodes per clip");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("--out", report_path, "report json path");

  auto* replay = app.add_subcommand("replay", "roll out and export a CSV");
  std::string replay_ckpt;
  std::string replay_clip;
  std::string replay_out = "trajectory.csv";
  replay->add_option("--checkpoint", replay_ckpt,
                     "checkpoint path (omit to replay the stored program)");
  replay->add_option("--clip", replay_clip, "clip path")->required();
  replay->add_option("--out", replay_out, "trajectory csv path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsageError;
  }

  try {
    if (*gendata) return cmd_gendata(scenario, duration, seed, out_path);
    if (*train) return cmd_train(config_path, resume);
    if (*eval_cmd)
      return cmd_eval(ckpt, clips, perturb, levels, episodes, eval_seed,
                      report_path);
    if (*replay) return cmd_replay(replay_ckpt, replay_clip, replay_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
