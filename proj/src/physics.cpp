#include "pmoe/physics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "pmoe/errors.hpp"

namespace pmoe::phys {

using nlohmann::json;

namespace {

double capsule_inertia(double mass, double half_length, double radius) {
  const double len = 2.0 * half_length;
  return mass * (len * len / 12.0 + radius * radius / 2.0);
}

// closest points between segments [p1,q1] and [p2,q2]
void closest_segment_points(const Vec2& p1, const Vec2& q1, const Vec2& p2,
                            const Vec2& q2, Vec2& c1, Vec2& c2) {
  const Vec2 d1 = q1 - p1;
  const Vec2 d2 = q2 - p2;
  const Vec2 r = p1 - p2;
  const double a = d1.squared_norm();
  const double e = d2.squared_norm();
  const double f = d2.dot(r);
  double s = 0.0, t = 0.0;
  constexpr double kEps = 1e-12;
  if (a <= kEps && e <= kEps) {
    // both degenerate to points
  } else if (a <= kEps) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= kEps) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      if (denom > kEps) s = std::clamp((b * f - c * e) / denom, 0.0, 1.0);
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  c1 = p1 + s * d1;
  c2 = p2 + t * d2;
}

Vec2 point_velocity(const BodyState& b, const Vec2& p) {
  return b.vel + b.omega * (p - b.pos).perp();
}

json vec2_json(const Vec2& v) { return json::array({v.x, v.y}); }
Vec2 vec2_from_json(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

void CharacterModel::validate() const {
  if (bodies.empty()) throw ConfigError("character model: no bodies");
  if (root < 0 || root >= body_count())
    throw ConfigError("character model: root index out of range");
  for (const auto& b : bodies) {
    if (!(b.mass > 0.0) || !(b.inertia > 0.0))
      throw ConfigError("character model: mass and inertia must be positive");
    if (b.half_length < 0.0 || b.radius <= 0.0)
      throw ConfigError("character model: bad collision shape");
  }
  std::vector<int> parent_of(bodies.size(), -2);
  parent_of[root] = -1;
  for (std::size_t j = 0; j < joints.size(); ++j) {
    const auto& jt = joints[j];
    if (jt.parent < 0 || jt.parent >= body_count() || jt.child < 0 ||
        jt.child >= body_count() || jt.child == root)
      throw ConfigError("character model: joint body index out of range");
    if (parent_of[jt.parent] == -2)
      throw ConfigError("character model: joints not in parent-first order");
    if (parent_of[jt.child] != -2)
      throw ConfigError("character model: body has two parent joints");
    if (jt.kp < 0.0 || jt.kd < 0.0 || jt.torque_limit < 0.0)
      throw ConfigError("character model: negative gains");
    if (jt.lower > jt.upper)
      throw ConfigError("character model: inverted joint limits");
    parent_of[jt.child] = static_cast<int>(j);
  }
  for (int i = 0; i < body_count(); ++i)
    if (parent_of[i] == -2)
      throw ConfigError("character model: body " + std::to_string(i) +
                        " not connected to the tree");
}

std::vector<int> CharacterModel::parent_joint_of_body() const {
  std::vector<int> parent_of(bodies.size(), -1);
  for (std::size_t j = 0; j < joints.size(); ++j)
    parent_of[joints[j].child] = static_cast<int>(j);
  return parent_of;
}

void SimConfig::validate() const {
  if (!(dt > 0.0)) throw ConfigError("sim config: timestep must be positive");
  if (substeps < 1) throw ConfigError("sim config: substeps must be >= 1");
  if (!(control_rate > 0.0)) throw ConfigError("sim config: bad control rate");
}

CharacterModel default_character() {
  CharacterModel m;
  const double pi = std::numbers::pi;
  auto body = [&](const std::string& name, double mass, double h, double r) {
    m.bodies.push_back({name, mass, capsule_inertia(mass, h, r), h, r});
  };
  // indices: 0 pelvis, 1 torso, 2 chest, 3 head, 4/5 right arm, 6/7 left
  // arm, 8/9 right leg, 10/11 left leg
  body("pelvis", 9.0, 0.05, 0.10);
  body("torso", 10.0, 0.15, 0.11);
  body("chest", 8.0, 0.12, 0.11);
  body("head", 5.0, 0.03, 0.09);
  body("r_upper_arm", 2.5, 0.14, 0.05);
  body("r_forearm", 1.8, 0.16, 0.045);
  body("l_upper_arm", 2.5, 0.14, 0.05);
  body("l_forearm", 1.8, 0.16, 0.045);
  body("r_thigh", 5.0, 0.20, 0.07);
  body("r_shin", 3.5, 0.20, 0.06);
  body("l_thigh", 5.0, 0.20, 0.07);
  body("l_shin", 3.5, 0.20, 0.06);

  auto joint = [&](const std::string& name, int parent, int child, Vec2 pa,
                   Vec2 ca, double offset, double lo, double hi, double kp,
                   double kd, double lim) {
    m.joints.push_back({name, parent, child, pa, ca, offset, lo, hi, kp, kd, lim});
  };
  joint("waist", 0, 1, {0.0, 0.08}, {-0.15, 0.0}, pi / 2, -0.6, 0.6, 400, 40, 250);
  joint("spine", 1, 2, {0.15, 0.0}, {-0.12, 0.0}, 0.0, -0.6, 0.6, 300, 30, 200);
  joint("neck", 2, 3, {0.12, 0.0}, {-0.08, 0.0}, 0.0, -0.8, 0.8, 60, 6, 50);
  joint("r_shoulder", 2, 4, {0.10, 0.03}, {-0.14, 0.0}, -pi, -2.5, 2.5, 120, 12, 80);
  joint("r_elbow", 4, 5, {0.14, 0.0}, {-0.16, 0.0}, 0.0, -2.4, 2.4, 90, 9, 60);
  joint("l_shoulder", 2, 6, {0.10, -0.03}, {-0.14, 0.0}, -pi, -2.5, 2.5, 120, 12, 80);
  joint("l_elbow", 6, 7, {0.14, 0.0}, {-0.16, 0.0}, 0.0, -2.4, 2.4, 90, 9, 60);
  joint("r_hip", 0, 8, {0.06, -0.04}, {-0.20, 0.0}, -pi / 2, -1.2, 1.2, 300, 30, 200);
  joint("r_knee", 8, 9, {0.20, 0.0}, {-0.20, 0.0}, 0.0, -2.2, 2.2, 250, 25, 180);
  joint("l_hip", 0, 10, {-0.06, -0.04}, {-0.20, 0.0}, -pi / 2, -1.2, 1.2, 300, 30, 200);
  joint("l_knee", 10, 11, {0.20, 0.0}, {-0.20, 0.0}, 0.0, -2.2, 2.2, 250, 25, 180);
  m.validate();
  return m;
}

CharacterModel load_character_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open character model file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("character model parse error: " + std::string(e.what()));
  }
  CharacterModel m;
  m.root = j.value("root", 0);
  for (const auto& b : j.at("bodies")) {
    BodyDef d;
    d.name = b.at("name").get<std::string>();
    d.mass = b.at("mass").get<double>();
    d.half_length = b.at("half_length").get<double>();
    d.radius = b.at("radius").get<double>();
    d.inertia = b.contains("inertia")
                    ? b.at("inertia").get<double>()
                    : capsule_inertia(d.mass, d.half_length, d.radius);
    m.bodies.push_back(d);
  }
  for (const auto& b : j.at("joints")) {
    JointDef d;
    d.name = b.at("name").get<std::string>();
    d.parent = b.at("parent").get<int>();
    d.child = b.at("child").get<int>();
    d.parent_anchor = vec2_from_json(b.at("parent_anchor"));
    d.child_anchor = vec2_from_json(b.at("child_anchor"));
    d.angle_offset = b.at("angle_offset").get<double>();
    d.lower = b.at("lower").get<double>();
    d.upper = b.at("upper").get<double>();
    d.kp = b.at("kp").get<double>();
    d.kd = b.at("kd").get<double>();
    d.torque_limit = b.at("torque_limit").get<double>();
    m.joints.push_back(d);
  }
  m.validate();
  return m;
}

void save_character_model(const CharacterModel& m, const std::string& path) {
  json j;
  j["root"] = m.root;
  for (const auto& b : m.bodies)
    j["bodies"].push_back({{"name", b.name},
                           {"mass", b.mass},
                           {"inertia", b.inertia},
                           {"half_length", b.half_length},
                           {"radius", b.radius}});
  for (const auto& jt : m.joints)
    j["joints"].push_back({{"name", jt.name},
                           {"parent", jt.parent},
                           {"child", jt.child},
                           {"parent_anchor", vec2_json(jt.parent_anchor)},
                           {"child_anchor", vec2_json(jt.child_anchor)},
                           {"angle_offset", jt.angle_offset},
                           {"lower", jt.lower},
                           {"upper", jt.upper},
                           {"kp", jt.kp},
                           {"kd", jt.kd},
                           {"torque_limit", jt.torque_limit}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write character model file: " + path);
  out << j.dump(2) << "\n";
}

World::World(CharacterModel model, int num_characters, SimConfig cfg)
    : model_(std::move(model)), num_chars_(num_characters), cfg_(cfg) {
  model_.validate();
  cfg_.validate();
  if (num_chars_ < 1) throw ConfigError("world: need at least one character");
  parent_joint_ = model_.parent_joint_of_body();
  ancestors_.resize(model_.body_count());
  for (int i = 0; i < model_.body_count(); ++i) {
    std::vector<int> chain;
    int b = i;
    while (parent_joint_[b] >= 0) {
      chain.push_back(parent_joint_[b]);
      b = model_.joints[parent_joint_[b]].parent;
    }
    std::reverse(chain.begin(), chain.end());
    ancestors_[i] = std::move(chain);
  }
}

void World::refresh_body_states(SimState& s) const {
  const int B = model_.body_count();
  s.bodies.resize(static_cast<std::size_t>(num_chars_) * B +
                  s.projectiles.size());
  for (int c = 0; c < num_chars_; ++c) {
    const VectorXd& q = s.chars[c].q;
    const VectorXd& qd = s.chars[c].qd;
    BodyState& root = s.bodies[body_id(c, model_.root)];
    root.pos = {q[0], q[1]};
    root.angle = q[2];
    root.vel = {qd[0], qd[1]};
    root.omega = qd[2];
    // joints are parent-first, so one pass suffices
    for (int j = 0; j < model_.joint_count(); ++j) {
      const JointDef& jt = model_.joints[j];
      const BodyState& p = s.bodies[body_id(c, jt.parent)];
      BodyState& ch = s.bodies[body_id(c, jt.child)];
      ch.angle = p.angle + jt.angle_offset + q[3 + j];
      ch.omega = p.omega + qd[3 + j];
      const Vec2 ra = rotate(p.angle, jt.parent_anchor);
      const Vec2 rc = rotate(ch.angle, jt.child_anchor);
      ch.pos = p.pos + ra - rc;
      ch.vel = p.vel + p.omega * ra.perp() - ch.omega * rc.perp();
    }
  }
  for (std::size_t p = 0; p < s.projectiles.size(); ++p)
    s.bodies[static_cast<std::size_t>(num_chars_) * B + p] =
        s.projectiles[p].state;
}

SimState World::init_state(double spacing) const {
  SimState s;
  s.chars.resize(num_chars_);
  for (int c = 0; c < num_chars_; ++c) {
    s.chars[c].q = VectorXd::Zero(model_.dof());
    s.chars[c].qd = VectorXd::Zero(model_.dof());
    s.chars[c].q[0] =
        (c - 0.5 * (num_chars_ - 1)) * spacing;
  }
  refresh_body_states(s);
  // drop each character so its lowest collision point rests on the ground
  for (int c = 0; c < num_chars_; ++c) {
    double lowest = 1e300;
    for (int i = 0; i < model_.body_count(); ++i) {
      const BodyState& b = s.bodies[body_id(c, i)];
      const Vec2 axis = rotate(b.angle, {model_.bodies[i].half_length, 0.0});
      lowest = std::min(lowest, b.pos.y - std::abs(axis.y) -
                                    model_.bodies[i].radius);
    }
    s.chars[c].q[1] -= lowest;
  }
  refresh_body_states(s);
  return s;
}

double World::pd_torque(int character, int joint, double target,
                        const SimState& s) const {
  if (character < 0 || character >= num_chars_ || joint < 0 ||
      joint >= model_.joint_count())
    throw InputError("pd_torque: unknown joint");
  if (!std::isfinite(target)) throw NumericError("pd_torque: non-finite target");
  const JointDef& jt = model_.joints[joint];
  const double angle = s.chars[character].q[3 + joint];
  const double rate = s.chars[character].qd[3 + joint];
  const double tau = jt.kp * (target - angle) - jt.kd * rate;
  return std::clamp(tau, -jt.torque_limit, jt.torque_limit);
}

Vec2 World::joint_world_anchor(const SimState& s, int character,
                               int joint) const {
  const JointDef& jt = model_.joints[joint];
  const BodyState& p = s.bodies[body_id(character, jt.parent)];
  return p.pos + rotate(p.angle, jt.parent_anchor);
}

std::vector<ContactPoint> World::detect_contacts(const SimState& s) const {
  std::vector<ContactPoint> out;
  const int B = model_.body_count();
  const int total = static_cast<int>(s.bodies.size());

  auto shape_of = [&](int id, Vec2& e0, Vec2& e1, double& r) {
    const BodyState& b = s.bodies[id];
    const BodyDef& def = id < num_chars_ * B
                             ? model_.bodies[id % B]
                             : s.projectiles[id - num_chars_ * B].def;
    const Vec2 axis = rotate(b.angle, {def.half_length, 0.0});
    e0 = b.pos - axis;
    e1 = b.pos + axis;
    r = def.radius;
  };
  auto character_of = [&](int id) { return id < num_chars_ * B ? id / B : -1; };

  // pairwise capsules: skip same-character pairs (self collision disabled)
  for (int a = 0; a < total; ++a) {
    for (int b = a + 1; b < total; ++b) {
      const int ca = character_of(a), cb = character_of(b);
      if (ca >= 0 && ca == cb) continue;
      Vec2 a0, a1, b0, b1;
      double ra, rb;
      shape_of(a, a0, a1, ra);
      shape_of(b, b0, b1, rb);
      Vec2 pa, pb;
      closest_segment_points(a0, a1, b0, b1, pa, pb);
      const Vec2 d = pb - pa;
      const double dist = d.norm();
      if (dist >= ra + rb) continue;
      ContactPoint cp;
      cp.body_a = a;
      cp.body_b = b;
      cp.normal = dist > 1e-9 ? d * (1.0 / dist) : Vec2{0.0, 1.0};
      cp.depth = ra + rb - dist;
      cp.position = pa + cp.normal * (ra - 0.5 * cp.depth);
      out.push_back(cp);
    }
  }
  // ground half-plane at y = 0, normal +y; test both capsule endpoints
  for (int b = 0; b < total; ++b) {
    Vec2 e0, e1;
    double r;
    shape_of(b, e0, e1, r);
    const Vec2 ends[2] = {e0, e1};
    const int n_ends = (e1 - e0).squared_norm() > 1e-18 ? 2 : 1;
    for (int k = 0; k < n_ends; ++k) {
      const double pen = r - ends[k].y;
      if (pen <= 0.0) continue;
      ContactPoint cp;
      cp.body_a = kGroundId;
      cp.body_b = b;
      cp.normal = {0.0, 1.0};
      cp.depth = pen;
      cp.position = {ends[k].x, ends[k].y - r + 0.5 * pen};
      out.push_back(cp);
    }
  }
  return out;
}

std::vector<BodyWrench> World::contact_forces(
    std::vector<ContactPoint>& contacts, const SimState& s) const {
  std::vector<BodyWrench> wrench(s.bodies.size());
  for (ContactPoint& cp : contacts) {
    const Vec2 va = cp.body_a == kGroundId
                        ? Vec2{0.0, 0.0}
                        : point_velocity(s.bodies[cp.body_a], cp.position);
    const Vec2 vb = point_velocity(s.bodies[cp.body_b], cp.position);
    const Vec2 v_rel = vb - va;
    const double closing = -v_rel.dot(cp.normal);

    // Impulse-aware cap: one substep of force may at most stop the approach
    // and push the pair apart by the current depth. Keeps stiff penalties from
    // launching light limbs.
    const int B = model_.body_count();
    auto inv_mass_at = [&](int id) {
      const BodyDef& def = id < num_chars_ * B
                               ? model_.bodies[id % B]
                               : s.projectiles[id - num_chars_ * B].def;
      const double rn = (cp.position - s.bodies[id].pos).cross(cp.normal);
      return 1.0 / def.mass + rn * rn / def.inertia;
    };
    double inv_m = inv_mass_at(cp.body_b);
    if (cp.body_a != kGroundId) inv_m += inv_mass_at(cp.body_a);
    const double impulse_cap =
        (std::max(0.0, closing) + cp.depth / cfg_.dt) / (inv_m * cfg_.dt);

    cp.normal_force = std::clamp(
        cfg_.contact_stiffness * cp.depth + cfg_.contact_damping * closing, 0.0,
        std::min(cfg_.max_contact_force, impulse_cap));
    const Vec2 tangent = cp.normal.perp();
    const double vt = v_rel.dot(tangent);
    const double limit = cfg_.friction * cp.normal_force;
    cp.tangent_force = std::clamp(-cfg_.tangent_damping * vt, -limit, limit);

    const Vec2 f = cp.normal * cp.normal_force + tangent * cp.tangent_force;
    BodyWrench& wb = wrench[cp.body_b];
    wb.force += f;
    wb.torque += (cp.position - s.bodies[cp.body_b].pos).cross(f);
    if (cp.body_a != kGroundId) {
      BodyWrench& wa = wrench[cp.body_a];
      wa.force -= f;
      wa.torque -= (cp.position - s.bodies[cp.body_a].pos).cross(f);
    }
  }
  return wrench;
}

void World::integrate_substep(SimState& s, const Substep& in,
                              std::vector<ContactPoint>& contact_log,
                              std::vector<double>* power_accum) const {
  const int B = model_.body_count();
  const int n = model_.dof();
  const int J = model_.joint_count();
  const double dt = cfg_.dt;

  refresh_body_states(s);
  std::vector<ContactPoint> contacts = detect_contacts(s);
  const std::vector<BodyWrench> wrench = contact_forces(contacts, s);
  for (const ContactPoint& cp : contacts) {
    contact_log.push_back(cp);
    const int ca = cp.body_a == kGroundId || cp.body_a >= num_chars_ * B
                       ? -1
                       : cp.body_a / B;
    const int cb = cp.body_b >= num_chars_ * B ? -1 : cp.body_b / B;
    if (ca >= 0 && cb >= 0 && ca != cb) ++s.inter_character_contacts;
  }

  // Momentum bookkeeping: each character's linear momentum after the substep
  // must equal its momentum before plus the external (gravity + contact)
  // impulse; integration error is rolled into the root velocity afterwards.
  double char_mass = 0.0;
  for (int i = 0; i < B; ++i) char_mass += model_.bodies[i].mass;
  std::vector<Vec2> target_momentum(num_chars_);
  for (int c = 0; c < num_chars_; ++c) {
    Vec2 p, f_ext = {0.0, char_mass * cfg_.gravity};
    for (int i = 0; i < B; ++i) {
      p += model_.bodies[i].mass * s.bodies[body_id(c, i)].vel;
      f_ext += wrench[body_id(c, i)].force;
    }
    target_momentum[c] = p + dt * f_ext;
  }

  for (int c = 0; c < num_chars_; ++c) {
    const VectorXd& q = s.chars[c].q;
    const VectorXd& qd = s.chars[c].qd;

    // per-body Jacobians of COM position and orientation
    std::vector<MatrixXd> jlin(B);
    const Vec2 root_pos = {q[0], q[1]};
    MatrixXd mass_mat = MatrixXd::Zero(n, n);
    VectorXd rhs = VectorXd::Zero(n);

    // world angular velocity per body, and Coriolis acceleration (qdd = 0)
    std::vector<double> wvel(B);
    std::vector<Vec2> coriolis(B);
    wvel[model_.root] = qd[2];
    coriolis[model_.root] = {0.0, 0.0};
    for (int j = 0; j < J; ++j) {
      const JointDef& jt = model_.joints[j];
      wvel[jt.child] = wvel[jt.parent] + qd[3 + j];
      const Vec2 ra =
          rotate(s.bodies[body_id(c, jt.parent)].angle, jt.parent_anchor);
      const Vec2 rc =
          rotate(s.bodies[body_id(c, jt.child)].angle, jt.child_anchor);
      coriolis[jt.child] = coriolis[jt.parent] -
                           wvel[jt.parent] * wvel[jt.parent] * ra +
                           wvel[jt.child] * wvel[jt.child] * rc;
    }

    for (int i = 0; i < B; ++i) {
      const BodyState& b = s.bodies[body_id(c, i)];
      MatrixXd& jl = jlin[i];
      jl = MatrixXd::Zero(2, n);
      jl(0, 0) = 1.0;
      jl(1, 1) = 1.0;
      const Vec2 r_root = (b.pos - root_pos).perp();
      jl(0, 2) = r_root.x;
      jl(1, 2) = r_root.y;
      for (int j : ancestors_[i]) {
        const Vec2 w = joint_world_anchor(s, c, j);
        const Vec2 rj = (b.pos - w).perp();
        jl(0, 3 + j) = rj.x;
        jl(1, 3 + j) = rj.y;
      }
      const double m = model_.bodies[i].mass;
      const double inertia = model_.bodies[i].inertia;
      mass_mat.noalias() += m * jl.transpose() * jl;
      mass_mat(2, 2) += inertia;
      for (int j : ancestors_[i]) {
        mass_mat(2, 3 + j) += inertia;
        mass_mat(3 + j, 2) += inertia;
        for (int j2 : ancestors_[i]) mass_mat(3 + j, 3 + j2) += inertia;
      }

      // applied forces: gravity, contacts; minus Coriolis bias
      Vec2 f = {0.0, m * cfg_.gravity};
      f += wrench[body_id(c, i)].force;
      f -= m * coriolis[i];
      rhs.noalias() += jl.transpose() * Eigen::Vector2d(f.x, f.y);
      const double tau = wrench[body_id(c, i)].torque;
      rhs[2] += tau;
      for (int j : ancestors_[i]) rhs[3 + j] += tau;
    }

    // joint actuation
    for (int j = 0; j < J; ++j) {
      double tau;
      if (in.use_targets) {
        tau = pd_torque(c, j, (*in.targets)[c * J + j], s);
        // Implicit joint damping: the kd term is evaluated at the new rate by
        // folding kd*dt into the mass matrix, which keeps stiff PD gains
        // stable at this timestep.
        mass_mat(3 + j, 3 + j) += dt * model_.joints[j].kd;
      } else {
        tau = (*in.torques)[c * J + j];
        if (!std::isfinite(tau))
          throw NumericError("step_sim: non-finite torque");
        tau = std::clamp(tau, -model_.joints[j].torque_limit,
                         model_.joints[j].torque_limit);
      }
      rhs[3 + j] += tau;
      if (power_accum)
        (*power_accum)[c] += std::abs(tau * qd[3 + j]) / (J * cfg_.substeps);
    }

    const VectorXd qdd = mass_mat.ldlt().solve(rhs);
    s.chars[c].qd += dt * qdd;

    // Angular rates beyond anything a character can physically reach make the
    // explicit Coriolis terms unstable at this timestep; clamp them.
    constexpr double kMaxAngularRate = 40.0;
    for (int i = 2; i < n; ++i)
      s.chars[c].qd[i] =
          std::clamp(s.chars[c].qd[i], -kMaxAngularRate, kMaxAngularRate);

    s.chars[c].q += dt * s.chars[c].qd;

    // joint limits: clamp, kill outward rate
    for (int j = 0; j < J; ++j) {
      double& a = s.chars[c].q[3 + j];
      double& ad = s.chars[c].qd[3 + j];
      const JointDef& jt = model_.joints[j];
      if (a < jt.lower) {
        a = jt.lower;
        ad = std::max(ad, 0.0);
      } else if (a > jt.upper) {
        a = jt.upper;
        ad = std::min(ad, 0.0);
      }
    }
  }

  // Roll the discrete-integration momentum error into the root velocity so
  // the bookkeeping above holds exactly.
  refresh_body_states(s);
  for (int c = 0; c < num_chars_; ++c) {
    Vec2 p;
    for (int i = 0; i < B; ++i)
      p += model_.bodies[i].mass * s.bodies[body_id(c, i)].vel;
    const Vec2 dv = (target_momentum[c] - p) * (1.0 / char_mass);
    s.chars[c].qd[0] += dv.x;
    s.chars[c].qd[1] += dv.y;
  }

  // projectiles are free rigid bodies
  for (std::size_t p = 0; p < s.projectiles.size(); ++p) {
    Projectile& pr = s.projectiles[p];
    const BodyWrench& w = wrench[num_chars_ * B + p];
    pr.state.vel += dt * (Vec2{0.0, cfg_.gravity} + w.force * (1.0 / pr.def.mass));
    pr.state.omega += dt * w.torque / pr.def.inertia;
    pr.state.pos += dt * pr.state.vel;
    pr.state.angle += dt * pr.state.omega;
    pr.age += dt;
  }

  s.time += dt;
}

void World::check_state(const SimState& s) const {
  for (const auto& c : s.chars) {
    if (!c.q.allFinite() || !c.qd.allFinite())
      throw DivergenceError("simulation state became non-finite");
    if (std::abs(c.q[0]) > 1e6 || std::abs(c.q[1]) > 1e6)
      throw DivergenceError("simulation state diverged");
  }
}

void World::step_sim(SimState& s, const VectorXd& torques) const {
  if (torques.size() != actuated_joints())
    throw ShapeError("step_sim: torque vector length mismatch");
  Substep in;
  in.use_targets = false;
  in.torques = &torques;
  std::vector<ContactPoint> log;
  s.inter_character_contacts = 0;
  for (int k = 0; k < cfg_.substeps; ++k) integrate_substep(s, in, log, nullptr);
  s.contacts = std::move(log);
  refresh_body_states(s);
  check_state(s);
}

void World::step_targets(SimState& s, const VectorXd& targets,
                         std::vector<double>* mean_abs_power) const {
  if (targets.size() != actuated_joints())
    throw ShapeError("step_targets: target vector length mismatch");
  if (!targets.allFinite())
    throw NumericError("step_targets: non-finite target");
  Substep in;
  in.use_targets = true;
  in.targets = &targets;
  std::vector<ContactPoint> log;
  std::vector<double> power(num_chars_, 0.0);
  s.inter_character_contacts = 0;
  for (int k = 0; k < cfg_.substeps; ++k) integrate_substep(s, in, log, &power);
  s.contacts = std::move(log);
  refresh_body_states(s);
  check_state(s);
  if (mean_abs_power) *mean_abs_power = std::move(power);
}

Transform2 World::local_frame(const SimState& s, int character) const {
  if (character < 0 || character >= num_chars_)
    throw InputError("local_frame: bad character index");
  const BodyState& root = s.bodies[body_id(character, model_.root)];
  return Transform2{root.pos, root.angle};
}

double World::kinetic_energy(const SimState& s) const {
  double e = 0.0;
  const int B = model_.body_count();
  for (int c = 0; c < num_chars_; ++c)
    for (int i = 0; i < B; ++i) {
      const BodyState& b = s.bodies[body_id(c, i)];
      e += 0.5 * model_.bodies[i].mass * b.vel.squared_norm() +
           0.5 * model_.bodies[i].inertia * b.omega * b.omega;
    }
  for (const auto& p : s.projectiles)
    e += 0.5 * p.def.mass * p.state.vel.squared_norm() +
         0.5 * p.def.inertia * p.state.omega * p.state.omega;
  return e;
}

Vec2 World::linear_momentum(const SimState& s) const {
  Vec2 p;
  const int B = model_.body_count();
  for (int c = 0; c < num_chars_; ++c)
    for (int i = 0; i < B; ++i)
      p += model_.bodies[i].mass * s.bodies[body_id(c, i)].vel;
  for (const auto& pr : s.projectiles) p += pr.def.mass * pr.state.vel;
  return p;
}

}  // namespace pmoe::phys
