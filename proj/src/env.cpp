#include "imi/env.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace imi {

namespace {

double uniform(std::mt19937_64& rng, const Range& r) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return r.lo + (r.hi - r.lo) * u(rng);
}

double tracking(double weight, double error, double tol, double alpha) {
  const double e = std::max(0.0, error - tol);
  return weight * std::exp(-alpha * e * e);
}

bool inside_soft(const JointLimits& l, double q, double fraction) {
  const double mid = 0.5 * (l.lo + l.hi);
  const double half = 0.5 * (l.hi - l.lo) * fraction;
  return q >= mid - half && q <= mid + half;
}

void check_range(const Range& r, const char* name, double lo_min) {
  if (!(r.lo <= r.hi) || r.lo < lo_min) {
    throw std::invalid_argument(std::string("randomization: bad range ") + name);
  }
}

void check_pair(const std::array<double, 2>& p, const char* name) {
  if (!(p[1] > 0.0) || !(p[0] >= p[1])) {
    throw std::invalid_argument(std::string("constraints: ") + name +
                                " needs initial >= final > 0");
  }
}

}  // namespace

ObsVec observe(const RobotState& s, double phase, const Vec3& prev_action) {
  ObsVec o;
  const Vec2 g = s.projected_gravity();
  o << s.q[kUpper], s.q[kLower], s.dq[kUpper], s.dq[kLower], s.dq[kRear], s.pitch_rate, g.x(),
      g.y(), phase, prev_action.x(), prev_action.y(), prev_action.z();
  return o;
}

CriticObsVec observe_privileged(const RobotState& s, double phase, const Vec3& prev_action) {
  CriticObsVec o;
  o << observe(s, phase, prev_action), s.base_vel.x(), s.base_vel.y(), s.base_pos.x(),
      s.base_pos.y();
  return o;
}

void RewardConfig::validate() const {
  if (!(w_base_position > 0 && w_base_orientation > 0 && w_joint_position > 0 && w_default_pose > 0)) {
    throw std::invalid_argument("reward: tracking weights must be > 0");
  }
  for (double w : {w_smoothness_initial, w_smoothness_final, w_contact_force, w_joint_limit,
                   w_jitter, w_velocity}) {
    if (w > 0) throw std::invalid_argument("reward: penalty weights must be <= 0");
  }
  for (double t : {tol_base_position, tol_base_orientation, tol_joint_position, tol_contact_force,
                   tol_velocity}) {
    if (!(t >= 0)) throw std::invalid_argument("reward: tolerances must be >= 0");
  }
  for (double a : {alpha_base, alpha_angle, alpha_joint, alpha_default_pose}) {
    if (!(a > 0)) throw std::invalid_argument("reward: decay widths must be > 0");
  }
  if (!(joint_limit_soft_fraction > 0 && joint_limit_soft_fraction <= 1)) {
    throw std::invalid_argument("reward: joint_limit_soft_fraction must be in (0, 1]");
  }
}

RewardTerms reward_terms(const RewardInput& in, const RewardConfig& cfg, const RobotModel& model,
                         const Vec2& default_q) {
  RewardTerms r;
  const RobotState& s = in.state;
  const Frame& ref = in.reference;

  const double e_pos = std::hypot(s.base_pos.x() - ref.base_x, s.base_pos.y() - ref.base_z);
  const double e_ang = std::abs(wrap_angle(s.pitch - ref.base_pitch));
  const double e_joint = std::hypot(s.q[kUpper] - ref.q_upper, s.q[kLower] - ref.q_lower);
  r.base_position = tracking(cfg.w_base_position, e_pos, cfg.tol_base_position, cfg.alpha_base);
  r.base_orientation =
      tracking(cfg.w_base_orientation, e_ang, cfg.tol_base_orientation, cfg.alpha_angle);
  r.joint_position = tracking(cfg.w_joint_position, e_joint, cfg.tol_joint_position, cfg.alpha_joint);

  r.action_smoothness = in.smoothness_weight * (in.action - in.prev_action).squaredNorm();
  for (double f : in.wheel_force) {
    const double excess = std::max(0.0, f - cfg.tol_contact_force);
    r.contact_force += cfg.w_contact_force * excess * excess;
  }
  const bool within = inside_soft(model.upper_limits, s.q[kUpper], cfg.joint_limit_soft_fraction) &&
                      inside_soft(model.lower_limits, s.q[kLower], cfg.joint_limit_soft_fraction);
  r.joint_limit = within ? 0.0 : cfg.w_joint_limit;

  if (in.phase >= 1.0) {
    const double e_pd = std::hypot(s.q[kUpper] - default_q[0], s.q[kLower] - default_q[1]);
    r.default_pose = cfg.w_default_pose * std::exp(-cfg.alpha_default_pose * e_pd * e_pd);
    const double du = s.dq[kUpper], dl = s.dq[kLower];
    r.jitter = cfg.w_jitter * (du * du + dl * dl + std::abs(du) + std::abs(dl));
    const double excess = std::max(0.0, s.base_vel.norm() - cfg.tol_velocity);
    r.velocity = cfg.w_velocity * excess * excess;
  }

  r.total = r.base_position + r.base_orientation + r.joint_position + r.action_smoothness +
            r.contact_force + r.joint_limit + r.default_pose + r.jitter + r.velocity;
  return r;
}

double curriculum_value(const CurriculumSchedule& s, int update) {
  if (update <= s.start) return update < s.start || s.end > s.start ? s.initial : s.final;
  if (update >= s.end) return s.final;
  const double f = static_cast<double>(update - s.start) / static_cast<double>(s.end - s.start);
  return s.initial + f * (s.final - s.initial);
}

const char* cause_name(TerminationCause c) {
  switch (c) {
    case TerminationCause::kGroundCollision: return "ground_collision";
    case TerminationCause::kJointPosition: return "joint_position";
    case TerminationCause::kMotorTorque: return "motor_torque";
    case TerminationCause::kMechanicalPower: return "mechanical_power";
    case TerminationCause::kWheelVelocity: return "wheel_velocity";
    case TerminationCause::kTouchdownVelocity: return "touchdown_velocity";
    case TerminationCause::kReferenceDeviation: return "reference_deviation";
    case TerminationCause::kNumerical: return "numerical";
  }
  return "unknown";
}

void ConstraintConfig::validate() const {
  if (!(upper.lo < upper.hi) || !(lower.lo < lower.hi)) {
    throw std::invalid_argument("constraints: joint bounds must satisfy lo < hi");
  }
  check_pair(touchdown_speed, "touchdown_speed");
  check_pair(power, "power");
  check_pair(torque, "torque");
  check_pair(wheel_velocity, "wheel_velocity");
  check_pair(deviation_position, "deviation_position");
  check_pair(deviation_orientation, "deviation_orientation");
  if (!(0 <= curriculum_start && curriculum_start <= curriculum_end && curriculum_end <= 1)) {
    throw std::invalid_argument("constraints: need 0 <= curriculum_start <= curriculum_end <= 1");
  }
  if (!(first_iteration_intro >= 0 && first_iteration_intro <= 1)) {
    throw std::invalid_argument("constraints: first_iteration_intro must be in [0, 1]");
  }
}

ActiveConstraints resolve_constraints(const ConstraintConfig& cfg, int imi_iteration, int update,
                                      int total_updates) {
  const double n = static_cast<double>(std::max(total_updates, 1));
  double begin = cfg.curriculum_start;
  bool others_on = true;
  if (imi_iteration == 1) {
    const int intro = static_cast<int>(std::lround(cfg.first_iteration_intro * n));
    others_on = update >= intro;
    begin = std::max(begin, cfg.first_iteration_intro);
  }
  const int start = static_cast<int>(std::lround(begin * n));
  const int end = std::max(start, static_cast<int>(std::lround(cfg.curriculum_end * n)));
  auto value = [&](const std::array<double, 2>& p) {
    return curriculum_value({p[0], p[1], start, end}, update);
  };

  ActiveConstraints c;
  c.enabled.fill(others_on);
  c.enabled[static_cast<int>(TerminationCause::kJointPosition)] = true;
  c.upper = cfg.upper;
  c.lower = cfg.lower;
  c.touchdown_speed = value(cfg.touchdown_speed);
  c.power = value(cfg.power);
  c.torque = value(cfg.torque);
  c.wheel_velocity = value(cfg.wheel_velocity);
  c.deviation_position = value(cfg.deviation_position);
  c.deviation_orientation = value(cfg.deviation_orientation);
  return c;
}

ActiveConstraints final_constraints(const ConstraintConfig& cfg) {
  ActiveConstraints c;
  c.enabled.fill(true);
  c.upper = cfg.upper;
  c.lower = cfg.lower;
  c.touchdown_speed = cfg.touchdown_speed[1];
  c.power = cfg.power[1];
  c.torque = cfg.torque[1];
  c.wheel_velocity = cfg.wheel_velocity[1];
  c.deviation_position = cfg.deviation_position[1];
  c.deviation_orientation = cfg.deviation_orientation[1];
  return c;
}

double mechanical_power(const Vec3& torques, const Vec3& velocities) {
  return (torques.array() * velocities.array()).abs().sum();
}

bool ground_collision(const RobotModel& model, const RobotState& state, const Terrain& terrain) {
  const CollisionPoints p = collision_points(model, state);
  for (const auto* group : {&p.base, &p.lower, &p.upper}) {
    for (const Vec2& pt : *group) {
      if (pt.y() < terrain.height_at(pt.x())) return true;
    }
  }
  return false;
}

std::optional<TerminationCause> check_terminations(const TerminationInput& in,
                                                   const ActiveConstraints& c) {
  using C = TerminationCause;
  const RobotState& s = in.state;
  if (c.on(C::kGroundCollision) && ground_collision(in.model, s, in.terrain)) {
    return C::kGroundCollision;
  }
  if (c.on(C::kJointPosition) && (!c.upper.contains(s.q[kUpper]) || !c.lower.contains(s.q[kLower]))) {
    return C::kJointPosition;
  }
  if (c.on(C::kMotorTorque) &&
      (std::abs(in.raw_torques[0]) > c.torque || std::abs(in.raw_torques[1]) > c.torque)) {
    return C::kMotorTorque;
  }
  if (c.on(C::kMechanicalPower) && in.power > c.power) return C::kMechanicalPower;
  if (c.on(C::kWheelVelocity) && std::abs(s.dq[kRear]) > c.wheel_velocity) {
    return C::kWheelVelocity;
  }
  if (c.on(C::kTouchdownVelocity)) {
    for (const auto& v : in.touchdown_speed) {
      if (v && *v > c.touchdown_speed) return C::kTouchdownVelocity;
    }
  }
  if (c.on(C::kReferenceDeviation) && in.tracking) {
    const Frame& r = in.reference;
    const double e_pos = std::hypot(s.base_pos.x() - r.base_x, s.base_pos.y() - r.base_z);
    const double e_ang = std::abs(wrap_angle(s.pitch - r.base_pitch));
    if (e_pos > c.deviation_position || e_ang > c.deviation_orientation) {
      return C::kReferenceDeviation;
    }
  }
  return std::nullopt;
}

void RandomizationConfig::validate() const {
  check_range(mass_scale, "mass_scale", 1e-6);
  check_range(friction_scale, "friction_scale", 0.0);
  check_range(motor_strength, "motor_strength", 0.0);
  check_range(kp_scale, "kp_scale", 0.0);
  check_range(kd_scale, "kd_scale", 0.0);
  check_range(obstacle_height, "obstacle_height", 0.0);
  if (delay_min < 0 || delay_max < delay_min) throw std::invalid_argument("randomization: bad delay range");
  for (double v : {noise_joint_pos, noise_joint_vel, noise_ang_vel, noise_gravity, push_velocity,
                   push_interval}) {
    if (!(v >= 0)) throw std::invalid_argument("randomization: noise/push values must be >= 0");
  }
  if (!(obstacle_probability >= 0 && obstacle_probability <= 1)) {
    throw std::invalid_argument("randomization: obstacle_probability must be in [0, 1]");
  }
}

RandomizationSample randomize(const RandomizationConfig& cfg, double anchor, std::mt19937_64& rng) {
  RandomizationSample s;
  // Every draw happens regardless of the outcome so the stream position
  // does not depend on the sample.
  s.mass_scale = uniform(rng, cfg.mass_scale);
  s.friction_scale = uniform(rng, cfg.friction_scale);
  s.motor_strength = uniform(rng, cfg.motor_strength);
  s.kp_scale = uniform(rng, cfg.kp_scale);
  s.kd_scale = uniform(rng, cfg.kd_scale);
  s.delay_steps = std::uniform_int_distribution<int>(cfg.delay_min, cfg.delay_max)(rng);
  const double coin = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const double height = uniform(rng, cfg.obstacle_height);
  s.obstacle = coin < cfg.obstacle_probability;
  if (s.obstacle) {
    s.obstacle_height = height;
    s.obstacle_x = anchor + cfg.obstacle_offset;
  }
  return s;
}

double obstacle_anchor(const Trajectory& ref) {
  std::size_t apex = 0;
  for (std::size_t i = 1; i < ref.size(); ++i) {
    if (ref[i].base_z > ref[apex].base_z) apex = i;
  }
  if (ref[apex].base_z - ref[0].base_z > 0.05) return ref[apex].base_x;
  return 0.5 * (ref[0].base_x + ref[ref.size() - 1].base_x);
}

Terrain add_step(const Terrain& terrain, double x, double dh) {
  if (dh == 0.0) return terrain;
  std::vector<Terrain::Step> steps;
  bool inserted = false;
  for (const Terrain::Step& s : terrain.steps()) {
    if (s.x_start < x) {
      steps.push_back(s);
      continue;
    }
    if (!inserted) {
      if (s.x_start > x) steps.push_back({x, terrain.height_at(x) + dh});
      inserted = true;
    }
    steps.push_back({s.x_start, s.height + dh});
  }
  if (!inserted) steps.push_back({x, terrain.height_at(x) + dh});
  return Terrain(std::move(steps));
}

void EnvConfig::validate() const {
  model.validate();
  actuator.validate();
  reward.validate();
  constraints.validate();
  randomization.validate();
  if (!(policy_rate > 0) || substeps < 1) throw std::invalid_argument("env: bad rates");
  if (!(post_time >= 0)) throw std::invalid_argument("env: post_time must be >= 0");
  if (!(rsi_probability >= 0 && rsi_probability <= 1)) {
    throw std::invalid_argument("env: rsi_probability must be in [0, 1]");
  }
  if (!(rsi_span > 0 && rsi_span <= 1)) throw std::invalid_argument("env: rsi_span must be in (0, 1]");
  if (rsi_retries < 0) throw std::invalid_argument("env: rsi_retries must be >= 0");
  if (!(action_clip > 0)) throw std::invalid_argument("env: action_clip must be > 0");
  if (terrain_override) Terrain::parse(*terrain_override);
}

std::string episode_csv_header() {
  return "instance,episode,start_frame,rsi_start,steps,return,success,cause,peak_power,"
         "peak_torque,peak_touchdown_speed,mass_scale,friction_scale,motor_strength,kp_scale,"
         "kd_scale,delay_steps,obstacle,obstacle_height,obstacle_x";
}

std::string episode_csv_row(const EpisodeStats& e) {
  std::ostringstream os;
  os.precision(10);
  const RandomizationSample& s = e.sample;
  os << e.instance << ',' << e.episode << ',' << e.start_frame << ',' << int(e.rsi_start) << ','
     << e.steps << ',' << e.ret << ',' << int(e.success) << ','
     << (e.cause ? cause_name(*e.cause) : "timeout") << ',' << e.peak_power << ','
     << e.peak_torque << ',' << e.peak_touchdown_speed << ',' << s.mass_scale << ','
     << s.friction_scale << ',' << s.motor_strength << ',' << s.kp_scale << ',' << s.kd_scale
     << ',' << s.delay_steps << ',' << int(s.obstacle) << ',' << s.obstacle_height << ','
     << s.obstacle_x;
  return os.str();
}

FlipEnv::FlipEnv(std::shared_ptr<const EnvConfig> cfg, std::shared_ptr<const Trajectory> ref,
                 std::uint64_t seed, std::uint64_t instance)
    : cfg_(std::move(cfg)), ref_(std::move(ref)), rng_(seed), instance_(instance) {
  if (!cfg_ || !ref_) throw std::invalid_argument("FlipEnv: null config or reference");
  base_terrain_ = Terrain::parse(cfg_->terrain_override ? *cfg_->terrain_override
                                                        : ref_->meta().terrain);
  anchor_ = obstacle_anchor(*ref_);
  phase_map_.ref_duration = ref_->duration();
  end_time_ = ref_->duration() + cfg_->post_time;
  randomize_ = cfg_->randomization.enabled;
  constraints_ = final_constraints(cfg_->constraints);
  smoothness_weight_ = cfg_->reward.w_smoothness_initial;
  model_ = cfg_->model;
  actuator_ = cfg_->actuator;
  terrain_ = base_terrain_;
}

int FlipEnv::max_steps() const {
  return static_cast<int>(std::ceil(end_time_ * cfg_->policy_rate - 1e-9));
}

void FlipEnv::draw_episode(bool randomize_now) {
  sample_ = randomize_now ? randomize(cfg_->randomization, anchor_, rng_) : RandomizationSample{};
  model_ = cfg_->model;
  model_.base_mass *= sample_.mass_scale;
  model_.base_inertia *= sample_.mass_scale;
  model_.lower_mass *= sample_.mass_scale;
  model_.lower_inertia *= sample_.mass_scale;
  model_.upper_mass *= sample_.mass_scale;
  model_.upper_inertia *= sample_.mass_scale;
  model_.friction *= sample_.friction_scale;
  actuator_ = cfg_->actuator;
  actuator_.kp *= sample_.kp_scale;
  actuator_.kd *= sample_.kd_scale;
  actuator_.delay_steps = sample_.delay_steps;
  terrain_ = sample_.obstacle ? add_step(base_terrain_, sample_.obstacle_x, sample_.obstacle_height)
                              : base_terrain_;
}

RobotState FlipEnv::start_state(std::size_t frame) const {
  RobotState s = state_from_frame((*ref_)[frame]);
  // A start beyond an inserted obstacle is lifted onto it.
  const double x = s.base_pos.x();
  s.base_pos.y() += terrain_.height_at(x) - base_terrain_.height_at(x);
  s.time = ref_->time(frame);
  return s;
}

bool FlipEnv::start_violates(const RobotState& s) const {
  if (ground_collision(model_, s, terrain_)) return true;
  return !constraints_.upper.contains(s.q[kUpper]) || !constraints_.lower.contains(s.q[kLower]);
}

ObsVec FlipEnv::reset() {
  const bool rnd = randomize_ && cfg_->randomization.enabled;
  draw_episode(rnd);
  std::size_t frame = 0;
  bool rsi_start = false;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (rsi_ && u01(rng_) < cfg_->rsi_probability) {
    const auto span = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(cfg_->rsi_span * static_cast<double>(ref_->size()) - 1e-9)));
    std::uniform_int_distribution<std::size_t> pick(0, span - 1);
    for (int attempt = 0; attempt <= cfg_->rsi_retries; ++attempt) {
      const std::size_t f = pick(rng_);
      if (!start_violates(start_state(f))) {
        frame = f;
        rsi_start = true;
        break;
      }
    }
  }
  ObsVec obs = begin_episode(frame);
  stats_.rsi_start = rsi_start;
  return obs;
}

ObsVec FlipEnv::reset_at(std::size_t frame) {
  if (frame >= ref_->size()) throw std::out_of_range("reset_at: frame beyond reference");
  draw_episode(false);
  return begin_episode(frame);
}

ObsVec FlipEnv::begin_episode(std::size_t frame) {
  state_ = start_state(frame);
  delay_.reset(actuator_.delay_steps);
  prev_action_.setZero();
  const ContactForces c = contact_forces(model_, state_, terrain_);
  in_contact_ = {c.wheel[0].in_contact, c.wheel[1].in_contact};
  const double interval = cfg_->randomization.push_interval;
  const bool pushes = randomize_ && cfg_->randomization.enabled && interval > 0;
  next_push_ = pushes ? state_.time + interval : std::numeric_limits<double>::infinity();
  done_ = false;
  stats_ = EpisodeStats{};
  stats_.instance = instance_;
  stats_.episode = episodes_++;
  stats_.start_frame = frame;
  stats_.sample = sample_;
  last_obs_ = make_obs();
  return last_obs_;
}

ObsVec FlipEnv::make_obs() const {
  ObsVec o = observe(state_, phase(state_.time, phase_map_), prev_action_);
  if (!(randomize_ && cfg_->randomization.enabled)) return o;
  const RandomizationConfig& r = cfg_->randomization;
  auto& rng = const_cast<std::mt19937_64&>(rng_);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double k = std::sqrt(3.0);
  for (int i = 0; i < 2; ++i) o[i] += k * r.noise_joint_pos * u(rng);
  for (int i = 2; i < 5; ++i) o[i] += k * r.noise_joint_vel * u(rng);
  o[5] += k * r.noise_ang_vel * u(rng);
  for (int i = 6; i < 8; ++i) o[i] += k * r.noise_gravity * u(rng);
  return o;
}

CriticObsVec FlipEnv::critic_observation() const {
  return observe_privileged(state_, phase(state_.time, phase_map_), prev_action_);
}

ObsVec FlipEnv::step(const Vec3& action, double* reward, StepInfo* info_out) {
  if (done_) throw std::logic_error("FlipEnv::step after episode end; call reset()");
  StepInfo info;

  Vec3 a = action;
  if (!a.allFinite()) a.setZero();
  a = a.cwiseMax(-cfg_->action_clip).cwiseMin(cfg_->action_clip);
  const Setpoints sp = decode_action(delay_.push(a), actuator_).setpoints;

  const double dt = cfg_->sim_dt();
  const double t_ref = ref_->duration();
  const double step_start = state_.time;
  std::array<double, 2> wheel_force{};
  for (int k = 0; k < cfg_->substeps; ++k) {
    const JointTorques tq =
        pd_torque(sp, actuated_positions(state_), actuated_velocities(state_), actuator_);
    const Vec3 applied = tq.applied * sample_.motor_strength;
    const double power = mechanical_power(applied, actuated_velocities(state_));
    info.peak_power = std::max(info.peak_power, power);
    info.peak_torque = std::max({info.peak_torque, std::abs(applied[0]), std::abs(applied[1])});

    StepResult res;
    try {
      res = step_detailed(model_, state_, applied, terrain_, dt);
    } catch (const SimulationError&) {
      info.terminated = true;
      info.cause = TerminationCause::kNumerical;
      break;
    }
    state_ = res.state;
    if (k + 1 == cfg_->substeps) {
      state_.time = step_start + 1.0 / cfg_->policy_rate;
    }
    for (int w = 0; w < 2; ++w) {
      wheel_force[w] = std::max(wheel_force[w], res.contacts.wheel[w].force().norm());
    }

    const ContactForces now = contact_forces(model_, state_, terrain_);
    std::array<std::optional<double>, 2> onset{};
    for (int w = 0; w < 2; ++w) {
      if (now.wheel[w].in_contact && !in_contact_[w]) {
        onset[w] = -wheel_center_velocity(model_, state_, w).y();
        info.touchdown_speed = std::max(info.touchdown_speed, *onset[w]);
      }
      in_contact_[w] = now.wheel[w].in_contact;
    }

    const Frame ref_frame = imi::sample(*ref_, std::min(state_.time, t_ref));
    const TerminationInput in{model_, state_, terrain_, tq.raw, power, onset, ref_frame,
                              state_.time < t_ref};
    if (auto cause = check_terminations(in, constraints_)) {
      info.terminated = true;
      info.cause = cause;
      break;
    }
  }

  if (!info.terminated && state_.time >= next_push_) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double p = cfg_->randomization.push_velocity;
    state_.base_vel.x() += p * u(rng_);
    state_.base_vel.y() += p * u(rng_);
    next_push_ += cfg_->randomization.push_interval;
  }

  const double th = phase(state_.time, phase_map_);
  const Frame ref_frame = imi::sample(*ref_, std::min(state_.time, t_ref));
  if (info.cause == TerminationCause::kNumerical) {
    info.reward = RewardTerms{};
  } else {
    const RewardInput rin{state_, a, prev_action_, ref_frame, th, wheel_force, smoothness_weight_};
    info.reward = reward_terms(rin, cfg_->reward, model_, actuator_.default_q);
  }
  prev_action_ = a;

  info.timeout = !info.terminated && state_.time >= end_time_ - 1e-9;
  done_ = info.terminated || info.timeout;

  stats_.steps += 1;
  stats_.ret += info.reward.total;
  stats_.peak_power = std::max(stats_.peak_power, info.peak_power);
  stats_.peak_torque = std::max(stats_.peak_torque, info.peak_torque);
  stats_.peak_touchdown_speed = std::max(stats_.peak_touchdown_speed, info.touchdown_speed);
  if (done_) {
    stats_.success = info.timeout;
    stats_.cause = info.cause;
  }

  if (info.cause == TerminationCause::kNumerical) {
    last_obs_ = ObsVec::Zero();
  } else {
    last_obs_ = make_obs();
  }
  if (reward) *reward = info.reward.total;
  if (info_out) *info_out = info;
  return last_obs_;
}

std::uint64_t instance_seed(std::uint64_t master, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x1f1u};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

VecEnv::VecEnv(std::shared_ptr<const EnvConfig> cfg, std::shared_ptr<const Trajectory> ref,
               std::size_t n, std::uint64_t master_seed) {
  if (n == 0) throw std::invalid_argument("VecEnv: need at least one instance");
  envs_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) envs_.emplace_back(cfg, ref, instance_seed(master_seed, i), i);
}

Eigen::MatrixXd VecEnv::reset() {
  Eigen::MatrixXd obs(kObsDim, static_cast<Eigen::Index>(envs_.size()));
  for (std::size_t i = 0; i < envs_.size(); ++i) obs.col(static_cast<Eigen::Index>(i)) = envs_[i].reset();
  return obs;
}

Eigen::MatrixXd VecEnv::critic_observations() const {
  Eigen::MatrixXd obs(kCriticObsDim, static_cast<Eigen::Index>(envs_.size()));
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    obs.col(static_cast<Eigen::Index>(i)) = envs_[i].critic_observation();
  }
  return obs;
}

VecEnv::Step VecEnv::step(const Eigen::MatrixXd& actions) {
  const auto n = static_cast<Eigen::Index>(envs_.size());
  if (actions.rows() != kActionDim || actions.cols() != n) {
    throw std::invalid_argument("VecEnv::step: actions must be 3 x N");
  }
  Step out;
  out.obs.resize(kObsDim, n);
  out.critic_obs.resize(kCriticObsDim, n);
  out.terminal_critic_obs = Eigen::MatrixXd::Zero(kCriticObsDim, n);
  out.reward.resize(n);
  out.done.assign(envs_.size(), 0);
  out.timeout.assign(envs_.size(), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    FlipEnv& e = envs_[static_cast<std::size_t>(i)];
    StepInfo info;
    double r = 0.0;
    ObsVec o = e.step(actions.col(i), &r, &info);
    out.reward[i] = r;
    if (e.done()) {
      out.done[static_cast<std::size_t>(i)] = 1;
      out.timeout[static_cast<std::size_t>(i)] = info.timeout ? 1 : 0;
      out.terminal_critic_obs.col(i) = e.critic_observation();
      finished_.push_back(e.episode());
      o = e.reset();
    }
    out.obs.col(i) = o;
    out.critic_obs.col(i) = e.critic_observation();
  }
  return out;
}

void VecEnv::set_constraints(const ActiveConstraints& c) {
  for (auto& e : envs_) e.set_constraints(c);
}
void VecEnv::set_smoothness_weight(double w) {
  for (auto& e : envs_) e.set_smoothness_weight(w);
}
void VecEnv::set_randomization(bool on) {
  for (auto& e : envs_) e.set_randomization(on);
}
void VecEnv::set_rsi(bool on) {
  for (auto& e : envs_) e.set_rsi(on);
}

std::vector<EpisodeStats> VecEnv::drain_episodes() {
  std::vector<EpisodeStats> out;
  out.swap(finished_);
  return out;
}

Trajectory standing_reference(const RobotModel& model, double duration, double rate_hz) {
  const auto n = static_cast<std::size_t>(std::llround(duration * rate_hz)) + 1;
  Frame f;
  // Pre-compressed to the static contact sink so nothing settles at t = 0.
  f.base_z = model.rear_radius - model.total_mass() * model.gravity / (2.0 * model.contact_stiffness);
  TrajectoryMeta meta;
  meta.label = "standing";
  return Trajectory(rate_hz, std::vector<Frame>(n, f), meta);
}

EnvConfig balance_task_config() {
  EnvConfig cfg;
  cfg.actuator.kp = {10.0, 10.0, 0.0};
  cfg.actuator.kd = {1.0, 1.0, 0.8};
  cfg.actuator.action_scale = {0.5, 0.5, 5.0};
  cfg.constraints.upper = {-0.8, 0.8};
  cfg.constraints.lower = {-0.8, 0.8};
  cfg.randomization.enabled = false;
  cfg.rsi_probability = 0.0;
  cfg.post_time = 0.0;
  return cfg;
}

RolloutResult record_rollout(FlipEnv& env, const std::function<Vec3(const ObsVec&)>& policy,
                             TrajectoryMeta meta) {
  env.set_randomization(false);
  env.set_rsi(false);
  ObsVec obs = env.reset_at(0);
  RolloutRecorder recorder(env.config().policy_rate);
  while (!env.done()) {
    recorder.record(env.state());
    obs = env.step(policy(obs), nullptr, nullptr);
  }
  return {recorder.finish(std::move(meta)), env.episode()};
}

}  // namespace imi
