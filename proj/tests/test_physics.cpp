#include <cmath>

#include "doctest.h"
#include "pmoe/errors.hpp"
#include "pmoe/physics.hpp"

using namespace pmoe;
using namespace pmoe::phys;
using Eigen::VectorXd;

namespace {

// one-body, zero-joint character for free-body dynamics checks
CharacterModel point_body() {
  CharacterModel m;
  m.bodies.push_back({"ball", 2.0, 0.01, 0.0, 0.1});
  return m;
}

World default_world(int chars = 2) {
  return World(default_character(), chars, SimConfig{});
}

}  // namespace

TEST_CASE("model validation") {
  CharacterModel m = default_character();
  CHECK_NOTHROW(m.validate());
  m.bodies[0].mass = -1.0;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  m = default_character();
  m.joints[0].child = 0;  // root as child breaks the tree
  CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("pd torque") {
  World w = default_world();
  SimState s = w.init_state();
  const int j = 0;
  SUBCASE("at target with zero rate torque is zero") {
    CHECK(w.pd_torque(0, j, s.chars[0].q[3 + j], s) == 0.0);
  }
  SUBCASE("kp=10 kd=1 error 0.1 rate 0 gives 1.0") {
    CharacterModel m = default_character();
    m.joints[0].kp = 10.0;
    m.joints[0].kd = 1.0;
    World w2(m, 2, SimConfig{});
    SimState s2 = w2.init_state();
    CHECK(w2.pd_torque(0, 0, s2.chars[0].q[3] + 0.1, s2) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("huge error clamps to the torque limit") {
    const double lim = default_character().joints[j].torque_limit;
    CHECK(w.pd_torque(0, j, 100.0, s) == lim);
    CHECK(w.pd_torque(0, j, -100.0, s) == -lim);
  }
  SUBCASE("unknown joint") {
    CHECK_THROWS_AS(w.pd_torque(0, 99, 0.0, s), InputError);
  }
}

TEST_CASE("contact detection") {
  World w(point_body(), 2, SimConfig{});
  SimState s = w.init_state();
  SUBCASE("distant characters produce no contacts") {
    s.chars[0].q[0] = -5.0;
    s.chars[1].q[0] = 5.0;
    s.chars[0].q[1] = s.chars[1].q[1] = 3.0;
    w.refresh_body_states(s);
    CHECK(w.detect_contacts(s).empty());
  }
  SUBCASE("two overlapping circles") {
    s.chars[0].q[0] = 0.0;
    s.chars[1].q[0] = 0.15;
    s.chars[0].q[1] = s.chars[1].q[1] = 3.0;
    w.refresh_body_states(s);
    auto contacts = w.detect_contacts(s);
    REQUIRE(contacts.size() == 1);
    CHECK(contacts[0].depth == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(contacts[0].normal.x == doctest::Approx(1.0));
    CHECK(std::abs(contacts[0].normal.norm() - 1.0) < 1e-9);
  }
  SUBCASE("body resting on the ground has an up normal") {
    s.chars[0].q[1] = 0.05;  // radius 0.1, so penetrating
    s.chars[1].q[0] = 10.0;
    s.chars[1].q[1] = 5.0;
    w.refresh_body_states(s);
    auto contacts = w.detect_contacts(s);
    REQUIRE(contacts.size() == 1);
    CHECK(contacts[0].body_a == kGroundId);
    CHECK(contacts[0].normal.x == 0.0);
    CHECK(contacts[0].normal.y == 1.0);
  }
}

TEST_CASE("contact forces") {
  SimConfig cfg;
  cfg.contact_stiffness = 1e4;
  cfg.contact_damping = 100.0;
  World w(point_body(), 2, cfg);
  SimState s = w.init_state();
  s.chars[0].q << 0.0, 3.0, 0.0;
  s.chars[1].q << 0.19, 3.0, 0.0;  // depth 0.01
  w.refresh_body_states(s);
  auto contacts = w.detect_contacts(s);
  REQUIRE(contacts.size() == 1);

  SUBCASE("spring term: depth 0.01 at stiffness 1e4 gives 100 N") {
    w.contact_forces(contacts, s);
    CHECK(contacts[0].normal_force == doctest::Approx(100.0).epsilon(1e-12));
  }
  SUBCASE("third law within 1e-9") {
    s.chars[0].qd << 0.3, -0.1, 0.5;
    s.chars[1].qd << -0.2, 0.4, -0.3;
    w.refresh_body_states(s);
    auto cs = w.detect_contacts(s);
    auto wrench = w.contact_forces(cs, s);
    CHECK(std::abs(wrench[0].force.x + wrench[1].force.x) < 1e-9);
    CHECK(std::abs(wrench[0].force.y + wrench[1].force.y) < 1e-9);
  }
  SUBCASE("fast separation floors the normal force at zero") {
    s.chars[0].qd << -2.0, 0.0, 0.0;
    s.chars[1].qd << 2.0, 0.0, 0.0;
    w.refresh_body_states(s);
    auto cs = w.detect_contacts(s);
    w.contact_forces(cs, s);
    CHECK(cs[0].normal_force == 0.0);
  }
}

TEST_CASE("free body under gravity integrates semi-implicitly") {
  SimConfig cfg;
  cfg.dt = 0.01;
  cfg.substeps = 1;
  World w(point_body(), 1, cfg);
  SimState s = w.init_state();
  s.chars[0].q[1] = 5.0;  // in the air
  w.refresh_body_states(s);
  w.step_sim(s, VectorXd::Zero(0));
  CHECK(s.chars[0].qd[1] == doctest::Approx(-0.0981).epsilon(1e-12));
  // position uses the updated velocity
  CHECK(s.chars[0].q[1] == doctest::Approx(5.0 - 0.0981 * 0.01).epsilon(1e-12));
}

TEST_CASE("step_sim rejects bad torques and diverged states") {
  World w = default_world();
  SimState s = w.init_state();
  VectorXd tau = VectorXd::Zero(w.actuated_joints());
  tau[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(w.step_sim(s, tau), NumericError);
  CHECK_THROWS_AS(w.step_sim(s, VectorXd::Zero(3)), ShapeError);
  s.chars[0].q[0] = 2e6;
  CHECK_THROWS_AS(w.step_sim(s, VectorXd::Zero(w.actuated_joints())),
                  DivergenceError);
}

TEST_CASE("step_sim is bit deterministic") {
  World w = default_world();
  VectorXd tau(w.actuated_joints());
  for (int i = 0; i < tau.size(); ++i) tau[i] = 0.5 * std::sin(i);
  SimState a = w.init_state();
  SimState b = w.init_state();
  for (int k = 0; k < 30; ++k) {
    w.step_sim(a, tau);
    w.step_sim(b, tau);
  }
  for (int c = 0; c < 2; ++c) {
    CHECK(a.chars[c].q == b.chars[c].q);
    CHECK(a.chars[c].qd == b.chars[c].qd);
  }
}

TEST_CASE("momentum conserved without gravity, torques, contacts") {
  SimConfig cfg;
  cfg.gravity = 0.0;
  World w(default_character(), 1, cfg);
  SimState s = w.init_state();
  s.chars[0].q[1] += 5.0;  // airborne, no ground contact
  s.chars[0].qd[0] = 0.4;
  s.chars[0].qd[2] = 0.3;
  for (int j = 0; j < 11; ++j) s.chars[0].qd[3 + j] = 0.3 * std::sin(j + 1.0);
  w.refresh_body_states(s);
  Vec2 p0 = w.linear_momentum(s);
  for (int k = 0; k < 30; ++k) {
    w.step_sim(s, VectorXd::Zero(w.actuated_joints()));
    const Vec2 p1 = w.linear_momentum(s);
    CHECK(std::abs(p1.x - p0.x) < 1e-6);
    CHECK(std::abs(p1.y - p0.y) < 1e-6);
    p0 = p1;
  }
}

TEST_CASE("kinetic energy exactly conserved for free bodies") {
  SimConfig cfg;
  cfg.gravity = 0.0;
  World w(point_body(), 1, cfg);
  SimState s = w.init_state();
  s.chars[0].q[1] = 5.0;
  s.chars[0].qd << 1.0, 2.0, 3.0;
  s.projectiles.push_back(
      {{"obj", 3.0, 0.01, 0.0, 0.08}, {{10.0, 8.0}, 0.0, {1.5, 0.2}, 2.0}, 0.0});
  w.refresh_body_states(s);
  const double e0 = w.kinetic_energy(s);
  for (int k = 0; k < 60; ++k) {
    const double before = w.kinetic_energy(s);
    w.step_sim(s, VectorXd::Zero(w.actuated_joints()));
    const double after = w.kinetic_energy(s);
    CHECK(std::abs(after - before) / std::max(before, 1e-12) <= 1e-6);
  }
  CHECK(w.kinetic_energy(s) == doctest::Approx(e0));
}

TEST_CASE("joint limits hold after every step") {
  World w = default_world();
  SimState s = w.init_state();
  VectorXd tau = VectorXd::Constant(w.actuated_joints(), 500.0);  // slam limits
  for (int k = 0; k < 60; ++k) {
    w.step_sim(s, tau);
    for (int c = 0; c < 2; ++c)
      for (int j = 0; j < 11; ++j) {
        CHECK(s.chars[c].q[3 + j] >= w.model().joints[j].lower);
        CHECK(s.chars[c].q[3 + j] <= w.model().joints[j].upper);
      }
    tau = -tau;
  }
}

TEST_CASE("local frame") {
  World w(point_body(), 1, SimConfig{});
  SimState s = w.init_state();
  SUBCASE("identity at origin with zero heading") {
    s.chars[0].q << 0.0, 0.0, 0.0;
    w.refresh_body_states(s);
    const Transform2 t = w.local_frame(s, 0);
    const Vec2 p = t.to_local_point({1.5, -2.0});
    CHECK(p.x == doctest::Approx(1.5));
    CHECK(p.y == doctest::Approx(-2.0));
  }
  SUBCASE("translation") {
    s.chars[0].q << 2.0, 0.0, 0.0;
    w.refresh_body_states(s);
    const Vec2 p = w.local_frame(s, 0).to_local_point({3.0, 0.0});
    CHECK(p.x == doctest::Approx(1.0));
    CHECK(p.y == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("rotation by pi/2 maps +x offset to -y") {
    s.chars[0].q << 0.0, 0.0, std::numbers::pi / 2;
    w.refresh_body_states(s);
    const Vec2 p = w.local_frame(s, 0).to_local_point({1.0, 0.0});
    CHECK(p.x == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p.y == doctest::Approx(-1.0));
  }
}

TEST_CASE("two-character rollout: third law on every logged contact") {
  World w = default_world();
  SimState s = w.init_state(0.55);  // overlapping reach
  VectorXd tau = VectorXd::Zero(w.actuated_joints());
  int contact_steps = 0;
  for (int k = 0; k < 90; ++k) {
    w.step_sim(s, tau);
    if (!s.contacts.empty()) ++contact_steps;
    for (const auto& cp : s.contacts) {
      CHECK(std::abs(cp.normal.norm() - 1.0) < 1e-9);
      CHECK(cp.depth >= 0.0);
      CHECK(cp.normal_force >= 0.0);
    }
  }
  CHECK(contact_steps > 0);  // characters rest on the ground at least
}

TEST_CASE("character model file round trip") {
  const CharacterModel m = default_character();
  const std::string path = "test_character_model.json";
  save_character_model(m, path);
  const CharacterModel r = load_character_model(path);
  CHECK(r.bodies.size() == m.bodies.size());
  CHECK(r.joints.size() == m.joints.size());
  for (std::size_t i = 0; i < m.bodies.size(); ++i) {
    CHECK(r.bodies[i].mass == m.bodies[i].mass);
    CHECK(r.bodies[i].half_length == m.bodies[i].half_length);
  }
  for (std::size_t j = 0; j < m.joints.size(); ++j) {
    CHECK(r.joints[j].kp == m.joints[j].kp);
    CHECK(r.joints[j].angle_offset == m.joints[j].angle_offset);
  }
  std::remove(path.c_str());
}
