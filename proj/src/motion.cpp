#include "pmoe/motion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "pmoe/errors.hpp"
#include "pmoe/rng.hpp"

namespace pmoe::motion {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'C', 'L', 'P'};
constexpr std::uint32_t kVersion = 1;

const std::vector<std::string> kFieldOrder = {
    "root_pos",     "root_heading", "joint_angles", "joint_rates", "body_pos",
    "body_heading", "body_lin_vel", "body_ang_vel", "pd_targets"};

void write_raw(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, &v, 4); }
void write_f64(std::ostream& out, double v) { write_raw(out, &v, 8); }

void read_raw(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("clip file truncated");
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v;
  read_raw(in, &v, 4);
  return v;
}

double read_f64(std::istream& in) {
  double v;
  read_raw(in, &v, 8);
  return v;
}

}  // namespace

void MotionClip::validate() const {
  if (frame_count() < 2) throw FormatError("clip: needs at least 2 frames");
  if (!(fps > 0.0)) throw FormatError("clip: fps must be positive");
  for (const auto& f : frames)
    if (static_cast<int>(f.size()) != characters)
      throw FormatError("clip: character count mismatch");
}

bool MotionClip::operator==(const MotionClip& o) const {
  if (id != o.id || fps != o.fps || characters != o.characters ||
      bodies != o.bodies || joints != o.joints ||
      frames.size() != o.frames.size())
    return false;
  for (std::size_t t = 0; t < frames.size(); ++t)
    for (int c = 0; c < characters; ++c) {
      const CharacterFrame& a = frames[t][c];
      const CharacterFrame& b = o.frames[t][c];
      if (a.root_pos.x != b.root_pos.x || a.root_pos.y != b.root_pos.y ||
          a.root_heading != b.root_heading ||
          a.joint_angles != b.joint_angles || a.joint_rates != b.joint_rates ||
          a.body_heading != b.body_heading ||
          a.body_ang_vel != b.body_ang_vel || a.pd_targets != b.pd_targets)
        return false;
      for (int i = 0; i < bodies; ++i)
        if (a.body_pos[i].x != b.body_pos[i].x ||
            a.body_pos[i].y != b.body_pos[i].y ||
            a.body_vel[i].x != b.body_vel[i].x ||
            a.body_vel[i].y != b.body_vel[i].y)
          return false;
    }
  return true;
}

void save_clip(const MotionClip& clip, const std::string& path) {
  clip.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write clip file: " + path);
  json header = {{"id", clip.id},
                 {"fps", clip.fps},
                 {"frames", clip.frame_count()},
                 {"characters", clip.characters},
                 {"bodies", clip.bodies},
                 {"joints", clip.joints},
                 {"fields", kFieldOrder}};
  const std::string hs = header.dump();
  write_raw(out, kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(hs.size()));
  write_raw(out, hs.data(), hs.size());
  for (const auto& frame : clip.frames)
    for (const auto& f : frame) {
      write_f64(out, f.root_pos.x);
      write_f64(out, f.root_pos.y);
      write_f64(out, f.root_heading);
      for (int j = 0; j < clip.joints; ++j) write_f64(out, f.joint_angles[j]);
      for (int j = 0; j < clip.joints; ++j) write_f64(out, f.joint_rates[j]);
      for (int i = 0; i < clip.bodies; ++i) {
        write_f64(out, f.body_pos[i].x);
        write_f64(out, f.body_pos[i].y);
      }
      for (int i = 0; i < clip.bodies; ++i) write_f64(out, f.body_heading[i]);
      for (int i = 0; i < clip.bodies; ++i) {
        write_f64(out, f.body_vel[i].x);
        write_f64(out, f.body_vel[i].y);
      }
      for (int i = 0; i < clip.bodies; ++i) write_f64(out, f.body_ang_vel[i]);
      for (int j = 0; j < clip.joints; ++j) write_f64(out, f.pd_targets[j]);
    }
  if (!out) throw IoError("write failed: " + path);
}

MotionClip load_clip(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open clip file: " + path);
  char magic[4];
  read_raw(in, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("not a clip file: bad magic");
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw FormatError("unsupported clip file version " +
                      std::to_string(version));
  const std::uint32_t hlen = read_u32(in);
  std::string hs(hlen, '\0');
  read_raw(in, hs.data(), hlen);
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw FormatError("clip header parse error: " + std::string(e.what()));
  }
  MotionClip clip;
  clip.id = header.at("id").get<std::string>();
  clip.fps = header.at("fps").get<double>();
  clip.characters = header.at("characters").get<int>();
  clip.bodies = header.at("bodies").get<int>();
  clip.joints = header.at("joints").get<int>();
  if (header.at("fields").get<std::vector<std::string>>() != kFieldOrder)
    throw FormatError("clip header: unexpected field layout");
  const int F = header.at("frames").get<int>();
  clip.frames.resize(F);
  for (int t = 0; t < F; ++t) {
    clip.frames[t].resize(clip.characters);
    for (int c = 0; c < clip.characters; ++c) {
      CharacterFrame& f = clip.frames[t][c];
      f.root_pos.x = read_f64(in);
      f.root_pos.y = read_f64(in);
      f.root_heading = read_f64(in);
      f.joint_angles.resize(clip.joints);
      f.joint_rates.resize(clip.joints);
      for (int j = 0; j < clip.joints; ++j) f.joint_angles[j] = read_f64(in);
      for (int j = 0; j < clip.joints; ++j) f.joint_rates[j] = read_f64(in);
      f.body_pos.resize(clip.bodies);
      f.body_heading.resize(clip.bodies);
      f.body_vel.resize(clip.bodies);
      f.body_ang_vel.resize(clip.bodies);
      for (int i = 0; i < clip.bodies; ++i) {
        f.body_pos[i].x = read_f64(in);
        f.body_pos[i].y = read_f64(in);
      }
      for (int i = 0; i < clip.bodies; ++i) f.body_heading[i] = read_f64(in);
      for (int i = 0; i < clip.bodies; ++i) {
        f.body_vel[i].x = read_f64(in);
        f.body_vel[i].y = read_f64(in);
      }
      for (int i = 0; i < clip.bodies; ++i) f.body_ang_vel[i] = read_f64(in);
      f.pd_targets.resize(clip.joints);
      for (int j = 0; j < clip.joints; ++j) f.pd_targets[j] = read_f64(in);
    }
  }
  clip.validate();
  return clip;
}

MotionClip resample_velocities(const MotionClip& clip) {
  if (clip.frame_count() < 2)
    throw InputError("resample_velocities: needs at least 2 frames");
  MotionClip out = clip;
  const int F = clip.frame_count();
  for (int c = 0; c < clip.characters; ++c) {
    for (int t = 0; t < F; ++t) {
      const int t0 = std::max(0, t - 1);
      const int t1 = std::min(F - 1, t + 1);
      const double scale = clip.fps / (t1 - t0);
      CharacterFrame& f = out.frames[t][c];
      const CharacterFrame& a = clip.frames[t0][c];
      const CharacterFrame& b = clip.frames[t1][c];
      for (int i = 0; i < clip.bodies; ++i) {
        f.body_vel[i] = (b.body_pos[i] - a.body_pos[i]) * scale;
        f.body_ang_vel[i] =
            angle_diff(b.body_heading[i], a.body_heading[i]) * scale;
      }
      for (int j = 0; j < clip.joints; ++j)
        f.joint_rates[j] =
            angle_diff(b.joint_angles[j], a.joint_angles[j]) * scale;
    }
  }
  return out;
}

void pose_from_frame(const CharacterFrame& f, phys::CharacterCoords& coords) {
  const int J = static_cast<int>(f.joint_angles.size());
  coords.q.resize(3 + J);
  coords.qd.resize(3 + J);
  coords.q[0] = f.root_pos.x;
  coords.q[1] = f.root_pos.y;
  coords.q[2] = f.root_heading;
  coords.qd[0] = f.body_vel[0].x;
  coords.qd[1] = f.body_vel[0].y;
  coords.qd[2] = f.body_ang_vel[0];
  for (int j = 0; j < J; ++j) {
    coords.q[3 + j] = f.joint_angles[j];
    coords.qd[3 + j] = f.joint_rates[j];
  }
}

CharacterFrame frame_from_state(const phys::World& world,
                                const phys::SimState& s, int character,
                                const VectorXd& pd_targets) {
  const auto& model = world.model();
  const int B = model.body_count();
  const int J = model.joint_count();
  CharacterFrame f;
  const auto& coords = s.chars[character];
  f.root_pos = {coords.q[0], coords.q[1]};
  f.root_heading = coords.q[2];
  f.joint_angles = coords.q.tail(J);
  f.joint_rates = coords.qd.tail(J);
  f.body_pos.resize(B);
  f.body_heading.resize(B);
  f.body_vel.resize(B);
  f.body_ang_vel.resize(B);
  for (int i = 0; i < B; ++i) {
    const auto& b = s.bodies[world.body_id(character, i)];
    f.body_pos[i] = b.pos;
    f.body_heading[i] = b.angle;
    f.body_vel[i] = b.vel;
    f.body_ang_vel[i] = b.omega;
  }
  f.pd_targets = pd_targets;
  return f;
}

namespace {

// joint indices of the default character
enum : int {
  kWaist = 0,
  kSpine,
  kNeck,
  kRShoulder,
  kRElbow,
  kLShoulder,
  kLElbow,
  kRHip,
  kRKnee,
  kLHip,
  kLKnee
};

struct ScriptParams {
  double amp = 1.0;    // amplitude jitter
  double phase = 0.0;  // phase jitter, s
};

// smooth 0..1 pulse active on [start, start+width) of each period
double pulse(double t, double period, double start, double width) {
  double u = std::fmod(t - start, period);
  if (u < 0.0) u += period;
  if (u >= width) return 0.0;
  const double edge = std::min(0.35, 0.4 * width);
  if (u < edge) return u / edge;
  if (u > width - edge) return (width - u) / edge;
  return 1.0;
}

VectorXd stance_targets(int joints) {
  VectorXd t = VectorXd::Zero(joints);
  t[kRHip] = 0.30;
  t[kRKnee] = -0.30;
  t[kLHip] = -0.30;
  t[kLKnee] = 0.30;
  return t;
}

VectorXd scenario_targets(const std::string& name, double t, int c,
                          const ScriptParams& sp, int joints) {
  VectorXd tg = stance_targets(joints);
  const double dir = c == 0 ? 1.0 : -1.0;
  const double pi = std::numbers::pi;
  const double ts = t + sp.phase;
  if (name == "push") {
    // alternating two-arm shoves, opponent braces
    const double mine = pulse(ts, 2.6, c == 0 ? 0.2 : 1.5, 1.0) * sp.amp;
    const double guard = 1.0 - mine;
    const double sh = mine * (pi / 2 * 0.95) + guard * 0.5;
    const double el = mine * 0.25 + guard * 0.9;
    tg[kRShoulder] = dir * sh;
    tg[kLShoulder] = dir * sh;
    tg[kRElbow] = dir * el;
    tg[kLElbow] = dir * el;
    tg[kWaist] = dir * 0.12 * mine;
  } else if (name == "highfive") {
    const double up = pulse(ts, 3.0, 0.6, 1.0) * sp.amp;
    tg[kRShoulder] = dir * (0.35 + up * (0.9 + pi / 2 - 0.35));
    tg[kRElbow] = dir * (1.0 - 0.9 * up);
    tg[kLShoulder] = dir * 0.3;
    tg[kLElbow] = dir * 1.0;
    tg[kWaist] = dir * 0.08 * up;
  } else if (name == "spin") {
    // contact-free calibration: torso twists and arm swings in place
    const double w = 2.0 * pi / 3.0;
    tg[kWaist] = dir * 0.25 * sp.amp * std::sin(w * ts);
    tg[kSpine] = dir * 0.15 * sp.amp * std::sin(w * ts + 0.4);
    tg[kNeck] = dir * 0.12 * std::sin(w * ts + 0.8);
    tg[kRShoulder] = dir * 0.25 * std::sin(w * ts + pi);
    tg[kLShoulder] = dir * 0.25 * std::sin(w * ts);
    tg[kRElbow] = dir * (0.5 + 0.25 * std::sin(w * ts + pi));
    tg[kLElbow] = dir * (0.5 + 0.25 * std::sin(w * ts));
  } else if (name == "box") {
    // alternating jabs with a guard pose between
    const double period = 2.0;
    const double off = c == 0 ? 0.3 : 0.8;
    const double jr = pulse(ts, period, off, 0.8) * sp.amp;
    const double jl = pulse(ts, period, off + period / 2, 0.8) * sp.amp;
    tg[kRShoulder] = dir * (jr * 1.35 + (1.0 - jr) * 0.35);
    tg[kRElbow] = dir * (jr * 0.15 + (1.0 - jr) * 1.2);
    tg[kLShoulder] = dir * (jl * 1.35 + (1.0 - jl) * 0.35);
    tg[kLElbow] = dir * (jl * 0.15 + (1.0 - jl) * 1.2);
    tg[kWaist] = dir * -0.10 * (jr + jl);  // lean into the jab
  } else if (name == "grapple") {
    // sustained mutual hold with slow push-pull lean
    const double w = 2.0 * pi / 4.0;
    const double lean = 0.08 * sp.amp * std::sin(w * ts);
    tg[kRShoulder] = dir * (1.30 + 0.08 * std::sin(w * ts));
    tg[kLShoulder] = dir * (1.30 - 0.08 * std::sin(w * ts));
    tg[kRElbow] = dir * 0.35;
    tg[kLElbow] = dir * 0.35;
    tg[kWaist] = dir * lean;
  } else {
    throw InputError("unknown scenario: " + name);
  }
  return tg;
}

}  // namespace

const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {"push", "highfive", "spin",
                                                 "box", "grapple"};
  return names;
}

MotionClip generate_reference_scenario(const phys::World& world,
                                       const std::string& name,
                                       double duration_s, std::uint64_t seed) {
  if (duration_s < 1.0)
    throw InputError("scenario duration must be at least 1 s");
  const auto& names = scenario_names();
  if (std::find(names.begin(), names.end(), name) == names.end())
    throw InputError("unknown scenario: " + name);

  Rng rng(seed);
  const int J = world.model().joint_count();
  const int chars = world.num_characters();
  std::vector<ScriptParams> sp(chars);
  for (auto& p : sp) {
    p.amp = rng.uniform(0.9, 1.1);
    p.phase = rng.uniform(0.0, 0.25);
  }

  const double control_dt = 1.0 / world.config().control_rate;
  // spin is the contact-free calibration scenario; keep those characters
  // well out of reach of each other
  phys::SimState s = world.init_state(name == "spin" ? 1.6 : 0.70);

  // During the settle phase the scripted motion is blended in gradually from
  // the plain stance so the step change cannot knock the characters over.
  auto targets_at = [&](double t) {
    VectorXd tg(chars * J);
    const double blend = std::clamp(1.0 + t, 0.0, 1.0);
    for (int c = 0; c < chars; ++c) {
      const VectorXd full = scenario_targets(name, t, c, sp[c], J);
      const VectorXd stance = stance_targets(J);
      tg.segment(c * J, J) = stance + blend * (full - stance);
    }
    return tg;
  };

  // settle into the scripted stance before recording
  const double settle = 1.0;
  for (int k = 0; k < static_cast<int>(settle * world.config().control_rate);
       ++k) {
    try {
      world.step_targets(s, targets_at(k * control_dt - settle));
    } catch (const DivergenceError& e) {
      throw FormatError(std::string("scenario generation diverged: ") +
                        e.what());
    }
  }

  MotionClip clip;
  clip.id = name + "_" + std::to_string(seed);
  clip.fps = world.config().control_rate;
  clip.characters = chars;
  clip.bodies = world.model().body_count();
  clip.joints = J;
  const int F = static_cast<int>(std::lround(duration_s * clip.fps));
  for (int t = 0; t < F; ++t) {
    const VectorXd tg = targets_at(t * control_dt);
    std::vector<CharacterFrame> frame;
    for (int c = 0; c < chars; ++c)
      frame.push_back(frame_from_state(world, s, c, tg.segment(c * J, J)));
    clip.frames.push_back(std::move(frame));
    try {
      world.step_targets(s, tg);
    } catch (const DivergenceError& e) {
      throw FormatError(std::string("scenario generation diverged: ") +
                        e.what());
    }
  }
  return clip;
}

namespace {

template <typename PerStep>
void replay_clip(const phys::World& world, const MotionClip& clip,
                 PerStep&& per_step) {
  const int J = clip.joints;
  phys::SimState s = world.init_state();
  s.projectiles.clear();
  for (int c = 0; c < clip.characters; ++c)
    pose_from_frame(clip.frames[0][c], s.chars[c]);
  world.refresh_body_states(s);
  for (int t = 1; t < clip.frame_count(); ++t) {
    VectorXd tg(clip.characters * J);
    for (int c = 0; c < clip.characters; ++c)
      tg.segment(c * J, J) = clip.frames[t - 1][c].pd_targets;
    world.step_targets(s, tg);
    per_step(t, s);
  }
}

}  // namespace

double replay_deviation(const phys::World& world, const MotionClip& clip) {
  double max_dev = 0.0;
  replay_clip(world, clip, [&](int t, const phys::SimState& s) {
    for (int c = 0; c < clip.characters; ++c)
      for (int i = 0; i < clip.bodies; ++i) {
        const Vec2 d = s.bodies[world.body_id(c, i)].pos -
                       clip.frames[t][c].body_pos[i];
        max_dev = std::max(max_dev, d.norm());
      }
  });
  return max_dev;
}

int replay_contact_events(const phys::World& world, const MotionClip& clip) {
  int events = 0;
  replay_clip(world, clip, [&](int, const phys::SimState& s) {
    events += s.inter_character_contacts;
  });
  return events;
}

void ClipLibrary::add(MotionClip clip) {
  clip.validate();
  clips_.push_back(std::move(clip));
  stats_.emplace_back();
}

void ClipLibrary::record_episode(std::size_t i, double mean_track_reward,
                                 bool success) {
  ClipStats& st = stats_.at(i);
  if (!st.initialized) {
    st.mean_track_reward = mean_track_reward;
    st.initialized = true;
  } else {
    st.mean_track_reward =
        0.95 * st.mean_track_reward + 0.05 * mean_track_reward;
  }
  ++st.attempts;
  if (success) ++st.successes;
}

double ClipLibrary::success_fraction(std::size_t i) const {
  const ClipStats& st = stats_.at(i);
  return st.attempts == 0
             ? 0.0
             : static_cast<double>(st.successes) / st.attempts;
}

}  // namespace pmoe::motion
