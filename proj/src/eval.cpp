#include "pmoe/eval.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

#include "pmoe/errors.hpp"

namespace pmoe::eval {

using ordered_json = nlohmann::ordered_json;

bool episode_success(const EpisodeTrace& trace, double threshold) {
  if (trace.frames.empty()) throw InputError("success check on an empty trace");
  for (const TraceFrame& f : trace.frames)
    for (double err : f.mean_body_error)
      if (err >= threshold) return false;
  return true;
}

double mpjpe_mm(const std::vector<EpisodeTrace>& traces) {
  double sum = 0.0;
  long count = 0;
  for (const EpisodeTrace& t : traces)
    for (const TraceFrame& f : t.frames)
      for (const VectorXd& errs : f.joint_errors) {
        sum += errs.sum();
        count += errs.size();
      }
  return count > 0 ? 1000.0 * sum / static_cast<double>(count) : 0.0;
}

double mean_episode_length_s(const std::vector<EpisodeTrace>& traces,
                             double control_rate) {
  if (traces.empty()) throw InputError("episode length of an empty trace set");
  if (control_rate <= 0.0) throw InputError("control rate must be positive");
  double frames = 0.0;
  for (const EpisodeTrace& t : traces) frames += t.frame_count();
  return frames / static_cast<double>(traces.size()) / control_rate;
}

EpisodeTrace rollout_trace(const phys::World& world,
                           const policy::PolicyState& policy,
                           const env::RunningNorm& norm,
                           const motion::MotionClip& clip,
                           const env::EnvConfig& cfg, std::uint64_t seed) {
  env::TrackingEnv environment(&world, cfg);
  Rng rng(seed);
  const int chars = world.num_characters();
  const int B = world.model().body_count();

  EpisodeTrace trace;
  trace.clip_id = clip.id;
  trace.seed = seed;

  std::vector<VectorXd> raw = environment.reset(&clip, rng);
  while (true) {
    std::vector<VectorXd> actions(chars);
    for (int c = 0; c < chars; ++c) {
      VectorXd feat = norm.normalize(raw[c]);
      if (cfg.perturbation.mode == env::PerturbationMode::kNoise)
        env::apply_observation_noise(feat, environment.observation_dim(),
                                     cfg.perturbation.noise_scale, rng);
      actions[c] = policy::sample_action(policy, feat, rng, true).action;
    }
    env::EnvStepResult res = environment.step(actions, rng);

    TraceFrame frame;
    frame.terminated = res.status == env::StepStatus::kTerminated;
    const int ref_frame = environment.frame();
    for (int c = 0; c < chars; ++c) {
      VectorXd errs(B);
      const auto& ref = clip.frames[ref_frame][c];
      for (int i = 0; i < B; ++i)
        errs[i] =
            (environment.sim().bodies[c * B + i].pos - ref.body_pos[i]).norm();
      frame.joint_errors.push_back(errs);
      frame.mean_body_error.push_back(errs.mean());
    }
    trace.frames.push_back(std::move(frame));

    if (res.status != env::StepStatus::kContinue) break;
    raw = res.features;
  }
  return trace;
}

MetricsReport run_evaluation(const phys::World& world,
                             const policy::PolicyState& policy,
                             const env::RunningNorm& norm,
                             const motion::ClipLibrary& library,
                             const EvalSettings& settings) {
  if (library.empty()) throw InputError("evaluation needs a nonempty library");
  MetricsReport report;
  report.clip_set = std::to_string(library.size()) + " clips";
  switch (settings.env.perturbation.mode) {
    case env::PerturbationMode::kNone:
      break;
    case env::PerturbationMode::kObject:
      report.perturbation_mode = "object";
      report.perturbation_level = settings.env.perturbation.object_masses.empty()
                                      ? 0.0
                                      : settings.env.perturbation.object_masses[0];
      break;
    case env::PerturbationMode::kNoise:
      report.perturbation_mode = "noise";
      report.perturbation_level = settings.env.perturbation.noise_scale;
      break;
  }

  std::vector<EpisodeTrace> all;
  int successes = 0, total = 0;
  for (std::size_t m = 0; m < library.size(); ++m) {
    std::vector<EpisodeTrace> clip_traces;
    int clip_successes = 0;
    for (int e = 0; e < settings.episodes_per_clip; ++e) {
      const std::uint64_t seed =
          settings.seed + 1000003 * static_cast<std::uint64_t>(m) + e;
      EpisodeTrace t = rollout_trace(world, policy, norm, library.clip(m),
                                     settings.env, seed);
      if (episode_success(t, settings.env.termination_threshold))
        ++clip_successes;
      clip_traces.push_back(std::move(t));
    }
    ClipMetrics cm;
    cm.clip_id = library.clip(m).id;
    cm.episodes = settings.episodes_per_clip;
    cm.success_rate =
        static_cast<double>(clip_successes) / settings.episodes_per_clip;
    cm.mpjpe_mm = mpjpe_mm(clip_traces);
    cm.mean_episode_s =
        mean_episode_length_s(clip_traces, world.config().control_rate);
    report.per_clip.push_back(cm);
    successes += clip_successes;
    total += settings.episodes_per_clip;
    for (EpisodeTrace& t : clip_traces) all.push_back(std::move(t));
  }
  report.success_rate = static_cast<double>(successes) / total;
  report.mpjpe_mm = mpjpe_mm(all);
  report.mean_episode_s =
      mean_episode_length_s(all, world.config().control_rate);
  return report;
}

std::vector<MetricsReport> run_perturbation_sweep(
    const phys::World& world, const policy::PolicyState& policy,
    const env::RunningNorm& norm, const motion::ClipLibrary& library,
    const EvalSettings& settings, const std::string& mode,
    const std::vector<double>& levels) {
  if (levels.empty()) throw InputError("perturbation sweep needs levels");
  std::vector<MetricsReport> reports;
  for (double level : levels) {
    EvalSettings s = settings;
    if (mode == "object") {
      s.env.perturbation.mode = env::PerturbationMode::kObject;
      s.env.perturbation.object_masses = {level};
    } else if (mode == "noise") {
      s.env.perturbation.mode = env::PerturbationMode::kNoise;
      s.env.perturbation.noise_scale = level;
    } else {
      throw InputError("unknown perturbation mode: " + mode);
    }
    MetricsReport r = run_evaluation(world, policy, norm, library, s);
    r.perturbation_level = level;
    reports.push_back(std::move(r));
  }
  return reports;
}

namespace {

ordered_json report_json(const MetricsReport& r) {
  ordered_json j;
  j["checkpoint"] = r.checkpoint;
  j["clip_set"] = r.clip_set;
  j["perturbation"] = {{"mode", r.perturbation_mode},
                       {"level", r.perturbation_level}};
  j["success_rate"] = r.success_rate;
  j["mpjpe_mm"] = r.mpjpe_mm;
  j["mean_episode_s"] = r.mean_episode_s;
  j["per_clip"] = ordered_json::array();
  for (const ClipMetrics& c : r.per_clip) {
    ordered_json jc;
    jc["clip_id"] = c.clip_id;
    jc["success_rate"] = c.success_rate;
    jc["mpjpe_mm"] = c.mpjpe_mm;
    jc["mean_episode_s"] = c.mean_episode_s;
    jc["episodes"] = c.episodes;
    j["per_clip"].push_back(jc);
  }
  return j;
}

}  // namespace

std::string report_to_json(const MetricsReport& report) {
  return report_json(report).dump(2);
}

void write_report_json(const std::vector<MetricsReport>& reports,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report: " + path);
  if (reports.size() == 1) {
    out << report_to_json(reports[0]) << '\n';
    return;
  }
  ordered_json arr = ordered_json::array();
  for (const MetricsReport& r : reports) arr.push_back(report_json(r));
  out << arr.dump(2) << '\n';
}

}  // namespace pmoe::eval
