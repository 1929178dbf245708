#include "imi/actuation.hpp"

#include <algorithm>

namespace imi {

void ActuatorConfig::validate() const {
  if ((kp.array() < 0).any() || (kd.array() < 0).any()) {
    throw std::invalid_argument("actuator: negative gain");
  }
  if ((action_scale.array() <= 0).any()) throw std::invalid_argument("actuator: scale <= 0");
  if ((torque_limit.array() <= 0).any()) throw std::invalid_argument("actuator: torque limit <= 0");
  if (!(rear_velocity_limit > 0)) throw std::invalid_argument("actuator: wheel velocity limit <= 0");
  if (delay_steps < 0) throw std::invalid_argument("actuator: negative delay");
}

DecodedAction decode_action(const Vec3& action, const ActuatorConfig& cfg) {
  DecodedAction out;
  Vec3 a = action;
  if (!a.allFinite()) {
    a.setZero();
    out.non_finite = true;
  }
  out.setpoints.q_des[0] = cfg.default_q[0] + cfg.action_scale[0] * a[0];
  out.setpoints.q_des[1] = cfg.default_q[1] + cfg.action_scale[1] * a[1];
  out.setpoints.q_des[2] = 0.0;
  out.setpoints.dq_des[2] = std::clamp(cfg.action_scale[2] * a[2], -cfg.rear_velocity_limit,
                                       cfg.rear_velocity_limit);
  return out;
}

JointTorques pd_torque(const Setpoints& sp, const Vec3& q, const Vec3& dq,
                       const ActuatorConfig& cfg) {
  JointTorques t;
  for (int i = 0; i < 3; ++i) {
    const double position_error = i < 2 ? sp.q_des[i] - q[i] : 0.0;
    t.raw[i] = cfg.kp[i] * position_error + cfg.kd[i] * (sp.dq_des[i] - dq[i]);
    t.applied[i] = std::clamp(t.raw[i], -cfg.torque_limit[i], cfg.torque_limit[i]);
  }
  return t;
}

ActionDelay::ActionDelay(int delay) { reset(delay); }

void ActionDelay::reset(int delay) {
  if (delay < 0) throw std::invalid_argument("ActionDelay: negative delay");
  delay_ = delay;
  pending_.assign(static_cast<std::size_t>(delay), Vec3::Zero());
}

Vec3 ActionDelay::push(const Vec3& action) {
  pending_.push_back(action);
  const Vec3 out = pending_.front();
  pending_.pop_front();
  return out;
}

}  // namespace imi
