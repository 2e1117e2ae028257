#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmoe/math2d.hpp"

namespace pmoe::phys {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Collision shape is a capsule along the body's local x axis: a segment of
// half-length `half_length` swept by `radius`. half_length == 0 is a circle.
struct BodyDef {
  std::string name;
  double mass = 1.0;
  double inertia = 0.1;
  double half_length = 0.0;
  double radius = 0.05;
};

// Revolute joint between parent and child. The child's world angle is
// parent angle + angle_offset + joint angle, so angle 0 is the rest pose.
struct JointDef {
  std::string name;
  int parent = 0;
  int child = 0;
  Vec2 parent_anchor;  // in parent frame, from COM
  Vec2 child_anchor;   // in child frame, from COM
  double angle_offset = 0.0;
  double lower = -3.0;  // joint angle limits, rad
  double upper = 3.0;
  double kp = 100.0;  // PD gains
  double kd = 10.0;
  double torque_limit = 100.0;
};

struct CharacterModel {
  std::vector<BodyDef> bodies;
  std::vector<JointDef> joints;
  int root = 0;

  int body_count() const { return static_cast<int>(bodies.size()); }
  int joint_count() const { return static_cast<int>(joints.size()); }
  int dof() const { return 3 + joint_count(); }

  // Throws ConfigError unless the joints form a tree rooted at `root` with
  // positive masses/inertias and nonnegative gains.
  void validate() const;

  // parent joint index per body (-1 for root); joints sorted so parents
  // precede children is required and checked by validate()
  std::vector<int> parent_joint_of_body() const;
};

// The default 12-body, 11-joint planar character.
CharacterModel default_character();

CharacterModel load_character_model(const std::string& path);
void save_character_model(const CharacterModel& model, const std::string& path);

struct SimConfig {
  double dt = 1.0 / 120.0;
  int substeps = 4;  // physics at 120 Hz, control at 30 Hz
  double gravity = -9.81;
  double contact_stiffness = 1e4;   // N/m
  double contact_damping = 100.0;   // N*s/m
  double friction = 0.8;
  double tangent_damping = 50.0;   // N*s/m, clamped by Coulomb cone
  double max_contact_force = 1500.0;  // N, keeps deep-impact penalties bounded
  double control_rate = 30.0;

  void validate() const;
};

struct BodyState {
  Vec2 pos;
  double angle = 0.0;
  Vec2 vel;
  double omega = 0.0;
};

struct Projectile {
  BodyDef def;
  BodyState state;
  double age = 0.0;
};

// Ground is body id kGroundId; character c body i has id c * B + i;
// projectile p has id num_chars * B + p.
constexpr int kGroundId = -1;

struct ContactPoint {
  int body_a = 0;
  int body_b = 0;
  Vec2 position;
  Vec2 normal;  // unit, from a toward b
  double depth = 0.0;
  double normal_force = 0.0;   // magnitude along normal, applied to b
  double tangent_force = 0.0;  // along perp(normal), applied to b
};

struct CharacterCoords {
  VectorXd q;   // (x, y, angle of root, joint angles...)
  VectorXd qd;
};

struct SimState {
  std::vector<CharacterCoords> chars;
  std::vector<BodyState> bodies;  // derived: character bodies, then projectiles
  std::vector<Projectile> projectiles;
  double time = 0.0;
  std::vector<ContactPoint> contacts;  // log for the last control step
  int inter_character_contacts = 0;    // over the last control step
};

// Rigid transform into a character's root-centered, heading-aligned frame.
struct Transform2 {
  Vec2 origin;
  double angle = 0.0;  // world heading of the frame

  Vec2 to_local_point(const Vec2& p) const {
    return rotate(-angle, p - origin);
  }
  Vec2 to_local_vector(const Vec2& v) const { return rotate(-angle, v); }
};

struct BodyWrench {
  Vec2 force;
  double torque = 0.0;
};

class World {
 public:
  World(CharacterModel model, int num_characters, SimConfig cfg);

  const CharacterModel& model() const { return model_; }
  const SimConfig& config() const { return cfg_; }
  int num_characters() const { return num_chars_; }
  int actuated_joints() const { return num_chars_ * model_.joint_count(); }

  // Characters in rest pose, spaced `spacing` apart along x and dropped so
  // the lowest collision point touches the ground.
  SimState init_state(double spacing = 0.75) const;

  // Refreshes the derived per-body world states from generalized coordinates.
  void refresh_body_states(SimState& s) const;

  double pd_torque(int character, int joint, double target,
                   const SimState& s) const;

  std::vector<ContactPoint> detect_contacts(const SimState& s) const;

  // Fills normal/tangent forces on the contacts and returns per-body wrench
  // accumulators (character bodies then projectiles, same indexing as
  // SimState::bodies).
  std::vector<BodyWrench> contact_forces(std::vector<ContactPoint>& contacts,
                                         const SimState& s) const;

  // One control step with fixed joint torques, integrated over substeps.
  // Torque layout: character-major, one entry per joint.
  void step_sim(SimState& s, const VectorXd& torques) const;

  // One control step where per-joint PD targets are re-evaluated each
  // substep. mean_abs_power, if given, receives mean |tau * qdot| over
  // actuated joints and substeps, per character.
  void step_targets(SimState& s, const VectorXd& targets,
                    std::vector<double>* mean_abs_power = nullptr) const;

  Transform2 local_frame(const SimState& s, int character) const;

  double kinetic_energy(const SimState& s) const;
  Vec2 linear_momentum(const SimState& s) const;

  int body_id(int character, int body) const {
    return character * model_.body_count() + body;
  }
  // World position of a joint's pivot.
  Vec2 joint_world_anchor(const SimState& s, int character, int joint) const;

 private:
  struct Substep {
    bool use_targets = false;
    const VectorXd* torques = nullptr;
    const VectorXd* targets = nullptr;
  };
  void integrate_substep(SimState& s, const Substep& in,
                         std::vector<ContactPoint>& contact_log,
                         std::vector<double>* power_accum) const;
  void check_state(const SimState& s) const;

  CharacterModel model_;
  int num_chars_ = 2;
  SimConfig cfg_;
  std::vector<int> parent_joint_;            // per body
  std::vector<std::vector<int>> ancestors_;  // joint chain per body, root first
};

}  // namespace pmoe::phys
