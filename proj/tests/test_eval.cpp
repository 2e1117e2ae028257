#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pmoe/errors.hpp"
#include "pmoe/eval.hpp"

using namespace pmoe;
using namespace pmoe::eval;
using Eigen::VectorXd;

namespace {

EpisodeTrace uniform_trace(int frames, int chars, int joints, double err) {
  EpisodeTrace t;
  t.clip_id = "synthetic";
  for (int f = 0; f < frames; ++f) {
    TraceFrame frame;
    for (int c = 0; c < chars; ++c) {
      frame.joint_errors.push_back(VectorXd::Constant(joints, err));
      frame.mean_body_error.push_back(err);
    }
    t.frames.push_back(frame);
  }
  return t;
}

}  // namespace

TEST_CASE("episode success threshold") {
  CHECK(episode_success(uniform_trace(10, 2, 4, 0.49)));
  CHECK_FALSE(episode_success(uniform_trace(10, 2, 4, 0.51)));

  SUBCASE("one bad frame fails the episode") {
    EpisodeTrace t = uniform_trace(10, 2, 4, 0.1);
    t.frames[7].mean_body_error[1] = 0.51;
    CHECK_FALSE(episode_success(t));
  }

  SUBCASE("perfect tracking") {
    EpisodeTrace t = uniform_trace(10, 2, 4, 0.0);
    CHECK(episode_success(t));
    CHECK(mpjpe_mm({t}) == 0.0);
  }

  SUBCASE("empty trace") {
    CHECK_THROWS_AS(episode_success(EpisodeTrace{}), InputError);
  }

  SUBCASE("per-frame average below threshold despite one large joint") {
    // success bounds the per-frame AVERAGE, not individual joints
    EpisodeTrace t = uniform_trace(3, 1, 4, 0.1);
    t.frames[1].joint_errors[0][2] = 0.9;
    t.frames[1].mean_body_error[0] = t.frames[1].joint_errors[0].mean();
    CHECK(t.frames[1].mean_body_error[0] < 0.5);
    CHECK(episode_success(t));
  }
}

TEST_CASE("mpjpe unit conversion") {
  CHECK(mpjpe_mm({uniform_trace(5, 2, 3, 0.05)}) ==
        doctest::Approx(50.0).epsilon(1e-12));
  CHECK(mpjpe_mm({uniform_trace(2, 1, 3, 0.1), uniform_trace(2, 1, 3, 0.3)}) ==
        doctest::Approx(200.0).epsilon(1e-12));

  SUBCASE("one-decimal rendering") {
    std::ostringstream os;
    os.precision(1);
    os << std::fixed << mpjpe_mm({uniform_trace(1, 1, 1, 0.0379)});
    CHECK(os.str() == "37.9");
  }
}

TEST_CASE("mean episode length") {
  std::vector<EpisodeTrace> traces = {uniform_trace(300, 1, 1, 0.0),
                                      uniform_trace(150, 1, 1, 0.0)};
  CHECK(mean_episode_length_s(traces, 30.0) ==
        doctest::Approx(7.5).epsilon(1e-12));
  CHECK(mean_episode_length_s({uniform_trace(300, 1, 1, 0.0)}, 30.0) ==
        doctest::Approx(10.0).epsilon(1e-12));
  CHECK_THROWS_AS(mean_episode_length_s({}, 30.0), InputError);
  CHECK_THROWS_AS(mean_episode_length_s(traces, 0.0), InputError);
}

namespace {

struct EvalFixture {
  phys::World world;
  motion::MotionClip clip;
  motion::ClipLibrary lib;
  policy::PolicyState pol;
  env::RunningNorm norm;
  EvalSettings settings;

  static policy::PolicyState make_pol(const phys::World& world) {
    env::TrackingEnv probe(&world, {});
    policy::PolicyConfig pc;
    pc.input_dim = probe.feature_dim();
    pc.action_dim = probe.action_dim();
    pc.hidden = 16;
    pc.gating_hidden = 8;
    pc.critic_hidden = 16;
    Rng rng(41);
    return policy::make_policy(pc, rng);
  }

  EvalFixture()
      : world(phys::default_character(), 2, phys::SimConfig{}),
        clip(motion::generate_reference_scenario(world, "spin", 1.0, 5)),
        pol(make_pol(world)),
        norm(env::TrackingEnv(&world, {}).feature_dim()) {
    lib.add(clip);
    settings.episodes_per_clip = 2;
    settings.env.randomize_start_frame = false;
    settings.env.max_episode_steps = 15;
  }
};

}  // namespace

TEST_CASE("rollout traces") {
  EvalFixture f;

  SUBCASE("deterministic per seed") {
    const EpisodeTrace a =
        rollout_trace(f.world, f.pol, f.norm, f.clip, f.settings.env, 7);
    const EpisodeTrace b =
        rollout_trace(f.world, f.pol, f.norm, f.clip, f.settings.env, 7);
    REQUIRE(a.frame_count() == b.frame_count());
    for (int i = 0; i < a.frame_count(); ++i)
      for (int c = 0; c < 2; ++c)
        CHECK(a.frames[i].joint_errors[c] == b.frames[i].joint_errors[c]);
  }

  SUBCASE("success implies no termination event") {
    const EpisodeTrace t =
        rollout_trace(f.world, f.pol, f.norm, f.clip, f.settings.env, 7);
    bool terminated = false;
    for (const TraceFrame& fr : t.frames) terminated |= fr.terminated;
    if (episode_success(t, f.settings.env.termination_threshold))
      CHECK_FALSE(terminated);
    else
      CHECK(t.frame_count() >= 1);
  }

  SUBCASE("mean error is the mean of the joint errors") {
    const EpisodeTrace t =
        rollout_trace(f.world, f.pol, f.norm, f.clip, f.settings.env, 7);
    for (const TraceFrame& fr : t.frames)
      for (int c = 0; c < 2; ++c)
        CHECK(fr.mean_body_error[c] ==
              doctest::Approx(fr.joint_errors[c].mean()).epsilon(1e-12));
  }
}

TEST_CASE("evaluation reports") {
  EvalFixture f;

  SUBCASE("shape and ranges") {
    const MetricsReport r =
        run_evaluation(f.world, f.pol, f.norm, f.lib, f.settings);
    CHECK(r.success_rate >= 0.0);
    CHECK(r.success_rate <= 1.0);
    CHECK(r.mpjpe_mm >= 0.0);
    CHECK(r.per_clip.size() == 1);
    CHECK(r.per_clip[0].episodes == 2);
    CHECK(r.perturbation_mode == "none");
  }

  SUBCASE("byte-identical reports under a fixed seed") {
    const MetricsReport a =
        run_evaluation(f.world, f.pol, f.norm, f.lib, f.settings);
    const MetricsReport b =
        run_evaluation(f.world, f.pol, f.norm, f.lib, f.settings);
    CHECK(report_to_json(a) == report_to_json(b));
  }

  SUBCASE("object sweep tags three mass levels") {
    const auto reports = run_perturbation_sweep(
        f.world, f.pol, f.norm, f.lib, f.settings, "object", {3.0, 7.0, 15.0});
    REQUIRE(reports.size() == 3);
    CHECK(reports[0].perturbation_mode == "object");
    CHECK(reports[0].perturbation_level == 3.0);
    CHECK(reports[1].perturbation_level == 7.0);
    CHECK(reports[2].perturbation_level == 15.0);
  }

  SUBCASE("noise sweep tags three scales") {
    const auto reports = run_perturbation_sweep(
        f.world, f.pol, f.norm, f.lib, f.settings, "noise", {0.1, 0.3, 0.7});
    REQUIRE(reports.size() == 3);
    CHECK(reports[2].perturbation_mode == "noise");
    CHECK(reports[0].perturbation_level == 0.1);
    CHECK(reports[2].perturbation_level == 0.7);
  }

  SUBCASE("unknown sweep mode") {
    CHECK_THROWS_AS(run_perturbation_sweep(f.world, f.pol, f.norm, f.lib,
                                           f.settings, "wind", {1.0}),
                    InputError);
    CHECK_THROWS_AS(run_perturbation_sweep(f.world, f.pol, f.norm, f.lib,
                                           f.settings, "object", {}),
                    InputError);
  }
}

TEST_CASE("report json schema") {
  MetricsReport r;
  r.checkpoint = "model.pmoe";
  r.clip_set = "1 clips";
  r.perturbation_mode = "noise";
  r.perturbation_level = 0.3;
  r.success_rate = 0.75;
  r.mpjpe_mm = 42.0;
  r.mean_episode_s = 6.5;
  ClipMetrics cm;
  cm.clip_id = "push_7";
  cm.episodes = 4;
  r.per_clip.push_back(cm);

  const std::string j = report_to_json(r);
  // stable key order
  const std::vector<std::string> keys = {
      "\"checkpoint\"", "\"clip_set\"",      "\"perturbation\"",
      "\"success_rate\"", "\"mpjpe_mm\"",    "\"mean_episode_s\"",
      "\"per_clip\""};
  std::size_t pos = 0;
  for (const std::string& k : keys) {
    const std::size_t at = j.find(k, pos);
    REQUIRE(at != std::string::npos);
    pos = at;
  }
  CHECK(j.find("push_7") != std::string::npos);

  SUBCASE("file writing round-trips") {
    const std::string path = "report_test.json";
    write_report_json({r}, path);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == j + "\n");
    std::remove(path.c_str());
  }
}
