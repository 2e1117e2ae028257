#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "pmoe/env.hpp"
#include "pmoe/errors.hpp"

using namespace pmoe;
using namespace pmoe::env;
using Eigen::VectorXd;

namespace {

phys::CharacterModel point_body() {
  phys::CharacterModel m;
  m.bodies.push_back({"ball", 2.0, 0.01, 0.0, 0.1});
  return m;
}

// A static clip whose every frame records the world's initial state.
motion::MotionClip static_clip(const phys::World& w, int frames) {
  phys::SimState s = w.init_state();
  motion::MotionClip clip;
  clip.id = "static";
  clip.fps = 30.0;
  clip.characters = w.num_characters();
  clip.bodies = w.model().body_count();
  clip.joints = w.model().joint_count();
  const VectorXd targets = VectorXd::Zero(clip.joints);
  for (int f = 0; f < frames; ++f) {
    std::vector<motion::CharacterFrame> fr;
    for (int c = 0; c < clip.characters; ++c)
      fr.push_back(motion::frame_from_state(w, s, c, targets));
    clip.frames.push_back(std::move(fr));
  }
  return clip;
}

}  // namespace

TEST_CASE("observe is expressed in the root frame") {
  phys::World w(point_body(), 2, phys::SimConfig{});
  phys::SimState s = w.init_state();

  SUBCASE("root at origin, heading zero: local equals world") {
    s.chars[0].q << 0.0, 0.7, 0.0;
    s.chars[0].qd << 0.3, -0.2, 0.0;
    w.refresh_body_states(s);
    HumanoidState h = observe(w, s, 0);
    CHECK(h.local_pos[0].x == doctest::Approx(0.0));
    CHECK(h.local_pos[0].y == doctest::Approx(0.0));  // root-centered
    CHECK(h.local_vel[0].x == doctest::Approx(0.3));
    CHECK(h.local_vel[0].y == doctest::Approx(-0.2));
  }

  SUBCASE("translation leaves the observation unchanged") {
    s.chars[0].q << 0.4, 0.7, 0.3;
    s.chars[0].qd << 0.1, 0.2, -0.4;
    w.refresh_body_states(s);
    const VectorXd before = observe(w, s, 0).flatten();
    s.chars[0].q[0] += 5.0;
    w.refresh_body_states(s);
    const VectorXd after = observe(w, s, 0).flatten();
    CHECK((before - after).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("rotating character and velocities leaves locals unchanged") {
    s.chars[0].q << 0.0, 0.7, 0.0;
    s.chars[0].qd << 1.0, 0.5, 0.0;
    w.refresh_body_states(s);
    const VectorXd before = observe(w, s, 0).flatten();
    const double th = std::numbers::pi / 2;
    s.chars[0].q[2] = th;
    const Vec2 rv = rotate(th, {1.0, 0.5});
    s.chars[0].qd << rv.x, rv.y, 0.0;
    w.refresh_body_states(s);
    const VectorXd after = observe(w, s, 0).flatten();
    CHECK((before - after).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("goal features") {
  phys::World w(point_body(), 2, phys::SimConfig{});
  motion::MotionClip clip = static_clip(w, 5);
  phys::SimState s = w.init_state();

  SUBCASE("posed at the target: offsets zero, joint targets copied") {
    GoalState g = goal_features(w, s, clip, 1, 0);
    CHECK(std::abs(g.dpos[0].x) < 1e-12);
    CHECK(std::abs(g.dpos[0].y) < 1e-12);
    CHECK(std::abs(g.dheading[0]) < 1e-12);
    CHECK(std::abs(g.dvel[0].x) < 1e-12);
    CHECK(std::abs(g.dangvel[0]) < 1e-12);
  }

  SUBCASE("heading wrap: current 3.0 vs target -3.0") {
    motion::MotionClip c2 = clip;
    c2.frames[1][0].body_heading[0] = -3.0;
    c2.frames[1][0].root_heading = -3.0;
    s.chars[0].q[2] = 3.0;
    w.refresh_body_states(s);
    GoalState g = goal_features(w, s, c2, 1, 0);
    CHECK(g.dheading[0] ==
          doctest::Approx(-(2.0 * std::numbers::pi - 6.0)).epsilon(1e-9));
  }

  SUBCASE("target 0.2 m ahead along heading") {
    motion::MotionClip c2 = clip;
    c2.frames[1][0].body_pos[0].x += 0.2;
    GoalState g = goal_features(w, s, c2, 1, 0);
    CHECK(g.dpos[0].x == doctest::Approx(0.2));
    CHECK(g.dpos[0].y == doctest::Approx(0.0));
  }

  SUBCASE("frame out of range") {
    CHECK_THROWS_AS(goal_features(w, s, clip, 99, 0), InputError);
  }
}

TEST_CASE("tracking reward") {
  phys::World w(point_body(), 2, phys::SimConfig{});
  motion::MotionClip clip = static_clip(w, 5);
  phys::SimState s = w.init_state();
  RewardParams params;

  SUBCASE("perfect tracking gives 1 in every component") {
    RewardBreakdown r = tracking_reward(w, s, clip, 0, 0, params);
    CHECK(r.rp == doctest::Approx(1.0));
    CHECK(r.rq == doctest::Approx(1.0));
    CHECK(r.rv == doctest::Approx(1.0));
    CHECK(r.ra == doctest::Approx(1.0));
    CHECK(r.rjp == doctest::Approx(1.0));
    CHECK(r.rjv == doctest::Approx(1.0));
    CHECK(r.r_track == doctest::Approx(1.0));
  }

  SUBCASE("position kernel: MSE 0.01 at alpha 20, weight 0.3") {
    s.chars[0].q[0] += 0.1;  // one body displaced 0.1 m -> MSE 0.01
    w.refresh_body_states(s);
    RewardBreakdown r = tracking_reward(w, s, clip, 0, 0, params);
    CHECK(r.rp == doctest::Approx(std::exp(-0.2)).epsilon(1e-12));
    CHECK(0.3 * r.rp == doctest::Approx(0.24562).epsilon(1e-4));
    CHECK(r.r_track == doctest::Approx(0.7 + 0.3 * std::exp(-0.2)));
  }

  SUBCASE("components stay in [0, 1]") {
    s.chars[0].q << 3.0, 9.0, 2.0;
    s.chars[0].qd << -8.0, 2.0, 7.0;
    w.refresh_body_states(s);
    RewardBreakdown r = tracking_reward(w, s, clip, 0, 0, params);
    for (double v : {r.rp, r.rq, r.rv, r.ra, r.rjp, r.rjv, r.r_track}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("energy reward") {
  VectorXd t(1), qd(1);
  SUBCASE("zero torque gives zero") {
    t << 0.0;
    qd << 5.0;
    CHECK(energy_reward(t, qd, 0.1) == 0.0);
  }
  SUBCASE("tau 2, rate 3, scale 0.1 gives -0.6") {
    t << 2.0;
    qd << 3.0;
    CHECK(energy_reward(t, qd, 0.1) == doctest::Approx(-0.6).epsilon(1e-12));
  }
  SUBCASE("nonzero power is strictly negative") {
    t << -1.5;
    qd << 0.2;
    CHECK(energy_reward(t, qd, 0.1) < 0.0);
  }
  SUBCASE("length mismatch") {
    VectorXd qd2(2);
    CHECK_THROWS_AS(energy_reward(t, qd2, 0.1), ShapeError);
  }
}

TEST_CASE("termination") {
  phys::World w(point_body(), 2, phys::SimConfig{});
  motion::MotionClip clip = static_clip(w, 50);
  phys::SimState s = w.init_state();
  EnvConfig cfg;

  SUBCASE("distance 0.6 terminates") {
    s.chars[0].q[0] += 0.6;
    w.refresh_body_states(s);
    CHECK(check_termination(w, s, clip, 5, cfg, 5) == StepStatus::kTerminated);
  }
  SUBCASE("distance 0.3 mid-clip continues") {
    s.chars[0].q[0] += 0.3;
    w.refresh_body_states(s);
    CHECK(check_termination(w, s, clip, 5, cfg, 5) == StepStatus::kContinue);
  }
  SUBCASE("exactly 0.5 continues (strict inequality)") {
    s.chars[0].q[0] += 0.5;
    w.refresh_body_states(s);
    CHECK(check_termination(w, s, clip, 5, cfg, 5) == StepStatus::kContinue);
  }
  SUBCASE("clip end truncates") {
    CHECK(check_termination(w, s, clip, 49, cfg, 10) == StepStatus::kTruncated);
  }
  SUBCASE("max episode length truncates") {
    CHECK(check_termination(w, s, clip, 5, cfg, cfg.max_episode_steps) ==
          StepStatus::kTruncated);
  }
}

TEST_CASE("object perturbations") {
  phys::World w(point_body(), 2, phys::SimConfig{});
  phys::SimState s = w.init_state();
  PerturbationConfig cfg;
  cfg.mode = PerturbationMode::kObject;
  cfg.throw_interval = 0.5;

  SUBCASE("spawned masses come from the configured set") {
    Rng rng(3);
    double next_throw = 0.0;
    for (int k = 0; k < 20; ++k) {
      s.time += 0.6;
      apply_perturbations(w, s, cfg, rng, &next_throw);
    }
    REQUIRE(s.projectiles.size() == 20);
    for (const auto& p : s.projectiles) {
      const double m = p.def.mass;
      CHECK((m == 3.0 || m == 7.0 || m == 15.0));
      CHECK(std::abs(p.state.vel.norm() - cfg.throw_speed) < 1e-9);
    }
  }

  SUBCASE("same seed gives an identical schedule") {
    phys::SimState a = w.init_state(), b = w.init_state();
    Rng ra(9), rb(9);
    double na = 0.0, nb = 0.0;
    for (int k = 0; k < 10; ++k) {
      a.time += 0.7;
      b.time += 0.7;
      apply_perturbations(w, a, cfg, ra, &na);
      apply_perturbations(w, b, cfg, rb, &nb);
    }
    REQUIRE(a.projectiles.size() == b.projectiles.size());
    for (std::size_t i = 0; i < a.projectiles.size(); ++i) {
      CHECK(a.projectiles[i].def.mass == b.projectiles[i].def.mass);
      CHECK(a.projectiles[i].state.pos.x == b.projectiles[i].state.pos.x);
      CHECK(a.projectiles[i].state.vel.y == b.projectiles[i].state.vel.y);
    }
  }

  SUBCASE("mode none never spawns") {
    PerturbationConfig off;
    Rng rng(1);
    double next_throw = 0.0;
    s.time = 100.0;
    apply_perturbations(w, s, off, rng, &next_throw);
    CHECK(s.projectiles.empty());
  }
}

TEST_CASE("observation noise") {
  VectorXd f = VectorXd::LinSpaced(10, 0.0, 9.0);
  const VectorXd orig = f;
  SUBCASE("sigma zero leaves features bit-identical") {
    Rng rng(5);
    apply_observation_noise(f, 6, 0.0, rng);
    CHECK(f == orig);
  }
  SUBCASE("noise only touches the observation slice") {
    Rng rng(5);
    apply_observation_noise(f, 6, 0.5, rng);
    CHECK(f.tail(4) == orig.tail(4));
    CHECK((f.head(6) - orig.head(6)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("running normalizer") {
  RunningNorm n(2);
  std::vector<VectorXd> xs;
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    VectorXd x(2);
    x << 3.0 + rng.normal() * 2.0, rng.normal() * 0.5 - 1.0;
    xs.push_back(x);
    n.update(x);
  }
  Eigen::MatrixXd all(2, 200);
  for (int i = 0; i < 200; ++i) all.col(i) = xs[i];
  const VectorXd mean = all.rowwise().mean();
  CHECK((n.mean() - mean).cwiseAbs().maxCoeff() < 1e-9);
  const VectorXd var =
      (all.colwise() - mean).cwiseProduct(all.colwise() - mean).rowwise().mean();
  CHECK((n.std() - var.cwiseSqrt()).cwiseAbs().maxCoeff() < 1e-9);

  SUBCASE("normalize standardizes the batch") {
    VectorXd z = n.normalize(xs[0]);
    CHECK(z.size() == 2);
    // round trip: z * std + mean == x
    CHECK(((z.cwiseProduct(n.std()) + n.mean()) - xs[0])
              .cwiseAbs()
              .maxCoeff() < 1e-9);
  }

  SUBCASE("merge of two halves equals one pass") {
    RunningNorm a(2), b(2);
    for (int i = 0; i < 100; ++i) a.update(xs[i]);
    for (int i = 100; i < 200; ++i) b.update(xs[i]);
    a.merge(b);
    CHECK(a.count() == doctest::Approx(200.0));
    CHECK((a.mean() - n.mean()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((a.std() - n.std()).cwiseAbs().maxCoeff() < 1e-9);
  }

  SUBCASE("fewer than two samples passes input through") {
    RunningNorm fresh(2);
    VectorXd x(2);
    x << 4.0, -2.0;
    CHECK(fresh.normalize(x) == x);
  }
}

TEST_CASE("tracking env episodes") {
  phys::World w(phys::default_character(), 2, phys::SimConfig{});
  motion::MotionClip clip = motion::generate_reference_scenario(w, "push", 2.0, 3);

  EnvConfig cfg;
  cfg.randomize_start_frame = false;
  TrackingEnv e(&w, cfg);
  Rng rng(1);

  SUBCASE("reset poses characters exactly on the start frame") {
    e.reset(&clip, rng);
    RewardBreakdown r =
        tracking_reward(w, e.sim(), clip, 0, 0, e.reward_params());
    CHECK(r.r_track == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(e.frame() == 0);
  }

  SUBCASE("start frame randomization is seeded") {
    EnvConfig rc = cfg;
    rc.randomize_start_frame = true;
    TrackingEnv e1(&w, rc), e2(&w, rc);
    Rng r1(7), r2(7);
    bool nonzero = false;
    for (int k = 0; k < 10; ++k) {
      e1.reset(&clip, r1);
      e2.reset(&clip, r2);
      CHECK(e1.frame() == e2.frame());
      nonzero = nonzero || e1.frame() != 0;
    }
    CHECK(nonzero);
  }

  SUBCASE("perfect action replay tracks the clip") {
    e.reset(&clip, rng);
    double min_track = 1.0;
    for (int t = 0; t + 1 < clip.frame_count(); ++t) {
      std::vector<VectorXd> actions;
      for (int c = 0; c < 2; ++c)
        actions.push_back(clip.frames[t][c].pd_targets -
                          clip.frames[t + 1][c].joint_angles);
      EnvStepResult res = e.step(actions, rng);
      for (const auto& r : res.rewards) min_track = std::min(min_track, r.r_track);
      // identity r_total = r_track + 0.5 r_energy must hold exactly
      for (const auto& r : res.rewards)
        CHECK(r.r_total == r.r_track + 0.5 * r.r_energy);
      if (res.status != StepStatus::kContinue) {
        CHECK(res.status == StepStatus::kTruncated);
        break;
      }
    }
    CHECK(min_track >= 0.99);
  }

  SUBCASE("wrong action count or dimension raises") {
    e.reset(&clip, rng);
    CHECK_THROWS_AS(e.step({VectorXd::Zero(11)}, rng), ShapeError);
    std::vector<VectorXd> bad = {VectorXd::Zero(3), VectorXd::Zero(3)};
    CHECK_THROWS_AS(e.step(bad, rng), ShapeError);
  }

  SUBCASE("no-perturbation runs are bit-reproducible") {
    std::vector<VectorXd> actions(2, VectorXd::Zero(11));
    TrackingEnv e2(&w, cfg);
    Rng ra(4), rb(4);
    e.reset(&clip, ra);
    e2.reset(&clip, rb);
    for (int t = 0; t < 20; ++t) {
      EnvStepResult a = e.step(actions, ra);
      EnvStepResult b = e2.step(actions, rb);
      for (int c = 0; c < 2; ++c) {
        CHECK(a.features[c] == b.features[c]);
        CHECK(a.rewards[c].r_total == b.rewards[c].r_total);
      }
      if (a.status != StepStatus::kContinue) break;
    }
  }
}

TEST_CASE("episode csv export") {
  std::vector<EpisodeRow> rows(3);
  for (int i = 0; i < 3; ++i) {
    rows[i].time = i / 30.0;
    rows[i].rewards.resize(2);
    rows[i].rewards[0].r_track = 0.9;
    rows[i].rewards[0].r_total = 0.9;
    rows[i].rewards[1].r_track = 0.8;
    rows[i].rewards[1].r_total = 0.8;
    rows[i].mean_error = 0.05 * i;
    rows[i].contact_count = i;
  }
  rows[2].terminated = true;
  const std::string path = "/tmp/pmoe_episode.csv";
  write_episode_csv(rows, 2, path);
  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line ==
        "time,r_track_0,r_energy_0,r_total_0,r_track_1,r_energy_1,r_total_1,"
        "mean_body_error,contact_count,terminated");
  int count = 0;
  while (std::getline(in, line)) ++count;
  CHECK(count == 3);
  std::remove(path.c_str());
}
