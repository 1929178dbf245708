#pragma once

#include <deque>

#include "imi/dynamics.hpp"

namespace imi {

// Per actuated joint, in action order: upper-body, lower-body, rear-wheel.
// Body joints track position setpoints, the rear wheel a velocity setpoint.
struct ActuatorConfig {
  Vec3 kp{60.0, 60.0, 0.0};
  Vec3 kd{1.5, 1.5, 0.8};
  Vec3 action_scale{1.0, 1.0, 20.0};   // rad, rad, rad/s
  Vec3 torque_limit{50.0, 50.0, 15.0};
  double rear_velocity_limit = 60.0;
  int delay_steps = 0;
  Vec2 default_q{0.0, 0.0};            // upper, lower

  void validate() const;
};

struct Setpoints {
  Vec3 q_des = Vec3::Zero();   // rear entry unused
  Vec3 dq_des = Vec3::Zero();  // zero for body joints
};

struct DecodedAction {
  Setpoints setpoints;
  bool non_finite = false;     // action contained NaN/inf and was zeroed
};

DecodedAction decode_action(const Vec3& action, const ActuatorConfig& cfg);

struct JointTorques {
  Vec3 raw = Vec3::Zero();      // PD law before the actuator limit
  Vec3 applied = Vec3::Zero();  // clamped to +-torque_limit
};

// q/dq: upper, lower, rear (rear position is ignored by the law).
JointTorques pd_torque(const Setpoints& sp, const Vec3& q, const Vec3& dq,
                       const ActuatorConfig& cfg);

// Actuated-joint slices of a robot state.
inline Vec3 actuated_positions(const RobotState& s) { return {s.q[kUpper], s.q[kLower], s.q[kRear]}; }
inline Vec3 actuated_velocities(const RobotState& s) { return {s.dq[kUpper], s.dq[kLower], s.dq[kRear]}; }

// Fixed delay line over policy steps. The action applied at step t is the
// one pushed at step t - delay; zero before that.
class ActionDelay {
 public:
  explicit ActionDelay(int delay = 0);

  Vec3 push(const Vec3& action);
  void reset(int delay);
  int delay() const { return delay_; }

 private:
  int delay_;
  std::deque<Vec3> pending_;
};

}  // namespace imi
