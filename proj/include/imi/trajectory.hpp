#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "imi/dynamics.hpp"

namespace imi {

// One sample of a reference or rollout. Rear-wheel angle is not stored:
// it is an unbounded joint that nothing tracks.
struct Frame {
  double base_x = 0.0;
  double base_z = 0.0;
  double base_pitch = 0.0;
  double q_upper = 0.0;
  double q_lower = 0.0;
  double dq_upper = 0.0;
  double dq_lower = 0.0;
  double dq_rear = 0.0;
  double dq_front = 0.0;
  double v_x = 0.0;
  double v_z = 0.0;
  double pitch_rate = 0.0;

  bool operator==(const Frame&) const = default;
  bool finite() const;
};

// CSV column order on disk, after the leading time column.
inline constexpr std::array<const char*, 13> kTrajectoryColumns = {
    "t",     "base_x",   "base_z",   "base_pitch", "q_upper", "q_lower",   "dq_upper",
    "dq_lower", "dq_rear", "dq_front", "v_x",       "v_z",     "pitch_rate"};

struct TrajectoryMeta {
  std::string label;
  // "synthetic", "rollout:<policy id>", "trim:<begin>:<end>" or
  // "translate:<dx>:<dz>".
  std::string source = "synthetic";
  std::string parent;             // label of the trajectory this was derived from
  std::string terrain = "flat";   // Terrain::describe() form

  bool operator==(const TrajectoryMeta&) const = default;
  bool is_root() const;
};

class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(double rate_hz, std::vector<Frame> frames, TrajectoryMeta meta = {});

  double rate_hz() const { return rate_hz_; }
  double dt() const { return 1.0 / rate_hz_; }
  std::size_t size() const { return frames_.size(); }
  double duration() const { return static_cast<double>(frames_.size() - 1) / rate_hz_; }
  double time(std::size_t i) const { return static_cast<double>(i) / rate_hz_; }

  const Frame& operator[](std::size_t i) const { return frames_[i]; }
  const std::vector<Frame>& frames() const { return frames_; }
  const TrajectoryMeta& meta() const { return meta_; }
  TrajectoryMeta& meta() { return meta_; }

  bool operator==(const Trajectory&) const = default;

 private:
  double rate_hz_ = 50.0;
  std::vector<Frame> frames_;
  TrajectoryMeta meta_;
};

struct PhaseMap {
  double ref_duration = 1.0;
};

// Normalized reference clock: t / T_ref, held at 1 afterwards.
double phase(double t, const PhaseMap& map);

// Linear interpolation between bracketing frames; pitch takes the shorter
// arc. Throws std::out_of_range outside [0, duration].
Frame sample(const Trajectory& traj, double t);

// Frames [begin, end) with the clock re-zeroed.
Trajectory trim(const Trajectory& traj, std::size_t begin, std::size_t end);
Trajectory translate(const Trajectory& traj, double dx, double dz);

// First frame whose forward speed reaches the threshold.
std::size_t auto_start_index(const Trajectory& traj, double vx_threshold);

// First frame after the flight apex at which the base starts decelerating
// its fall (ground reaction). Empty when the base never rises `clearance`
// above its starting height.
std::optional<std::size_t> touchdown_index(const Trajectory& traj, double clearance = 0.05);

// Smallest distance to a body-joint limit over all frames; negative when a
// limit is exceeded.
double joint_limit_margin(const Trajectory& traj, const RobotModel& model);

struct FlipParams {
  double drive_speed = 2.5;       // m/s, held through take-off
  double drive_duration = 0.6;    // s
  double flight_duration = 0.8;   // s
  double start_height = 0.0;      // terrain height under the start, m
  double landing_height = 0.0;
  double landing_duration = 0.3;  // s of rolling after touchdown
  double tuck_upper = 2.8;        // peak commanded upper-body angle, rad
  double tuck_lower = -1.2;
  double wheel_radius = 0.2;
  double gravity = 9.81;
  double rate_hz = 50.0;
  std::string label = "xi0";

  // Take-off vertical speed implied by the heights and flight time.
  double takeoff_vz() const;
  double apex_height() const;     // above the take-off base height
};

// Kinematic flip: constant-speed drive, ballistic arc with a full forward
// rotation, tuck beyond the default joint limits and a hard landing.
// Not dynamically consistent.
Trajectory synth_flip_reference(const FlipParams& params);

// Accumulates simulator states at policy ticks.
class RolloutRecorder {
 public:
  explicit RolloutRecorder(double rate_hz) : rate_hz_(rate_hz) {}
  void record(const RobotState& s);
  std::size_t size() const { return frames_.size(); }
  Trajectory finish(TrajectoryMeta meta) const;

 private:
  double rate_hz_;
  std::vector<Frame> frames_;
};

Frame frame_from_state(const RobotState& s);
RobotState state_from_frame(const Frame& f);

class TrajectoryParseError : public std::runtime_error {
 public:
  TrajectoryParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

void save_trajectory(const Trajectory& traj, const std::string& path);
Trajectory load_trajectory(const std::string& path);
std::string to_csv(const Trajectory& traj);
Trajectory from_csv(const std::string& text);

// Verifies every derived trajectory's parent chain ends at a synthetic or
// rollout source. Throws std::invalid_argument on a cycle or dangling parent.
void check_lineage(const std::map<std::string, TrajectoryMeta>& by_label);

}  // namespace imi
