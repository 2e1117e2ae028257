#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "pmoe/math2d.hpp"
#include "pmoe/physics.hpp"

namespace pmoe::motion {

using Eigen::VectorXd;

// One character's kinematic record at one frame, plus the PD target program
// that produced it (so generated clips can be replayed exactly).
struct CharacterFrame {
  Vec2 root_pos;
  double root_heading = 0.0;
  VectorXd joint_angles;           // J
  VectorXd joint_rates;            // J
  std::vector<Vec2> body_pos;      // B
  VectorXd body_heading;           // B
  std::vector<Vec2> body_vel;      // B
  VectorXd body_ang_vel;           // B
  VectorXd pd_targets;             // J
};

struct MotionClip {
  std::string id;
  double fps = 30.0;
  int characters = 2;
  int bodies = 0;
  int joints = 0;
  std::vector<std::vector<CharacterFrame>> frames;  // [frame][character]

  int frame_count() const { return static_cast<int>(frames.size()); }
  double duration() const { return frame_count() / fps; }
  void validate() const;

  bool operator==(const MotionClip& other) const;
};

// Clip file I/O. Format: magic "MCLP", u32 version, u32 header length, JSON
// header, then little-endian f64 frame blocks in declared field order.
void save_clip(const MotionClip& clip, const std::string& path);
MotionClip load_clip(const std::string& path);

// Recomputes velocities by finite differences of the recorded positions:
// central differences interior, one-sided at the ends, angles wrapped.
MotionClip resample_velocities(const MotionClip& clip);

// Poses a character's generalized coordinates from a clip frame.
void pose_from_frame(const CharacterFrame& f, phys::CharacterCoords& coords);

// Records a character's current state into a frame.
CharacterFrame frame_from_state(const phys::World& world,
                                const phys::SimState& s, int character,
                                const VectorXd& pd_targets);

// Scripted two-character scenarios recorded through the simulator.
// "spin" is a contact-free calibration scenario; the others are contact-rich.
const std::vector<std::string>& scenario_names();

MotionClip generate_reference_scenario(const phys::World& world,
                                       const std::string& name,
                                       double duration_s, std::uint64_t seed);

// Replays the clip's stored PD target program from its initial frame and
// returns the max body position deviation against the recorded frames.
double replay_deviation(const phys::World& world, const MotionClip& clip);

// Number of inter-character contact events seen when replaying the clip's
// generating program.
int replay_contact_events(const phys::World& world, const MotionClip& clip);

// Per-clip rolling statistics for motion sampling.
struct ClipStats {
  double mean_track_reward = 0.0;  // exponential moving average
  bool initialized = false;
  long successes = 0;
  long attempts = 0;
};

class ClipLibrary {
 public:
  void add(MotionClip clip);
  std::size_t size() const { return clips_.size(); }
  bool empty() const { return clips_.empty(); }
  const MotionClip& clip(std::size_t i) const { return clips_.at(i); }
  const ClipStats& stats(std::size_t i) const { return stats_.at(i); }
  ClipStats& stats(std::size_t i) { return stats_.at(i); }

  // EMA factor 0.95 per episode result.
  void record_episode(std::size_t i, double mean_track_reward, bool success);

  double duration(std::size_t i) const { return clips_.at(i).duration(); }
  double success_fraction(std::size_t i) const;

 private:
  std::vector<MotionClip> clips_;
  std::vector<ClipStats> stats_;
};

}  // namespace pmoe::motion
