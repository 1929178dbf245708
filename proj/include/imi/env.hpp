#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "imi/actuation.hpp"
#include "imi/dynamics.hpp"
#include "imi/trajectory.hpp"

namespace imi {

inline constexpr int kObsDim = 12;
inline constexpr int kCriticObsDim = 16;
inline constexpr int kActionDim = 3;

using ObsVec = Eigen::Matrix<double, kObsDim, 1>;
using CriticObsVec = Eigen::Matrix<double, kCriticObsDim, 1>;

// Observation layout:
//   0-1  q upper, lower
//   2-4  dq upper, lower, rear wheel
//   5    pitch rate
//   6-7  projected gravity (base frame)
//   8    phase
//   9-11 previous action
// Critic adds 12-13 base velocity, 14-15 base position.
ObsVec observe(const RobotState& s, double phase, const Vec3& prev_action);
CriticObsVec observe_privileged(const RobotState& s, double phase, const Vec3& prev_action);

struct RewardConfig {
  double w_base_position = 4.0;
  double tol_base_position = 0.4;      // m
  double alpha_base = 5.0;             // 1/m^2
  double w_base_orientation = 20.0;
  double tol_base_orientation = 0.8;   // rad
  double alpha_angle = 2.0;
  double w_joint_position = 1.0;
  double tol_joint_position = 0.1;
  double alpha_joint = 10.0;

  double w_smoothness_initial = -1e-5;
  double w_smoothness_final = -1e-3;
  double w_contact_force = -1e-6;
  double tol_contact_force = 350.0;    // N, per wheel
  double w_joint_limit = -1.0;
  // Penalty band: the indicator fires outside this fraction of the limits.
  double joint_limit_soft_fraction = 0.9;

  double w_default_pose = 1.0;
  double alpha_default_pose = 5.0;
  double w_jitter = -1e-4;
  double w_velocity = -3.0;
  double tol_velocity = 0.5;           // m/s

  void validate() const;
};

struct RewardTerms {
  double base_position = 0.0;
  double base_orientation = 0.0;
  double joint_position = 0.0;
  double action_smoothness = 0.0;
  double contact_force = 0.0;
  double joint_limit = 0.0;
  double default_pose = 0.0;
  double jitter = 0.0;
  double velocity = 0.0;
  double total = 0.0;
};

struct RewardInput {
  const RobotState& state;
  const Vec3& action;
  const Vec3& prev_action;
  const Frame& reference;   // already frozen to the last frame once phase hits 1
  double phase = 0.0;
  std::array<double, 2> wheel_force{};  // contact force magnitude, rear/front
  double smoothness_weight = -1e-5;
};

RewardTerms reward_terms(const RewardInput& in, const RewardConfig& cfg, const RobotModel& model,
                         const Vec2& default_q);

// Linear schedule over [start, end] updates, clamped outside.
struct CurriculumSchedule {
  double initial = 0.0;
  double final = 0.0;
  int start = 0;
  int end = 0;
};
double curriculum_value(const CurriculumSchedule& s, int update);

enum class TerminationCause : int {
  kGroundCollision = 0,
  kJointPosition,
  kMotorTorque,
  kMechanicalPower,
  kWheelVelocity,
  kTouchdownVelocity,
  kReferenceDeviation,
  kNumerical,  // simulator rejected the state; not one of the constraint causes
};
inline constexpr int kNumConstraintCauses = 7;
inline constexpr int kNumCauses = 8;
const char* cause_name(TerminationCause c);

// Threshold pairs are (initial, final); the curriculum window is given as
// fractions of the training run and resolved per IMI iteration.
struct ConstraintConfig {
  JointLimits upper{-2.4, 2.4};
  JointLimits lower{-2.0, 2.0};
  std::array<double, 2> touchdown_speed{4.0, 1.5};  // m/s downward
  std::array<double, 2> power{2400.0, 600.0};       // W
  std::array<double, 2> torque{50.0, 25.0};         // N m, body joints, pre-clamp
  std::array<double, 2> wheel_velocity{100.0, 60.0};
  std::array<double, 2> deviation_position{1.5, 0.5};
  std::array<double, 2> deviation_orientation{3.14, 1.2};
  double curriculum_start = 0.0;
  double curriculum_end = 0.8;
  // First IMI iteration: causes other than joint position switch on here.
  double first_iteration_intro = 0.5;

  void validate() const;
};

struct ActiveConstraints {
  std::array<bool, kNumConstraintCauses> enabled{};
  JointLimits upper;
  JointLimits lower;
  double touchdown_speed = 0.0;
  double power = 0.0;
  double torque = 0.0;
  double wheel_velocity = 0.0;
  double deviation_position = 0.0;
  double deviation_orientation = 0.0;

  bool on(TerminationCause c) const { return enabled[static_cast<int>(c)]; }
};

// imi_iteration <= 0 is treated like a later iteration (everything on,
// curriculum from the start).
ActiveConstraints resolve_constraints(const ConstraintConfig& cfg, int imi_iteration, int update,
                                      int total_updates);
ActiveConstraints final_constraints(const ConstraintConfig& cfg);

struct TerminationInput {
  const RobotModel& model;
  const RobotState& state;
  const Terrain& terrain;
  const Vec3& raw_torques;
  double power = 0.0;
  // Downward wheel-centre speed for wheels whose contact began this substep.
  std::array<std::optional<double>, 2> touchdown_speed{};
  const Frame& reference;
  bool tracking = true;  // phase < 1
};

std::optional<TerminationCause> check_terminations(const TerminationInput& in,
                                                   const ActiveConstraints& c);

// Sum of |tau_i * dq_i| over the actuated joints.
double mechanical_power(const Vec3& torques, const Vec3& velocities);

bool ground_collision(const RobotModel& model, const RobotState& state, const Terrain& terrain);

struct Range {
  double lo = 1.0;
  double hi = 1.0;
};

struct RandomizationConfig {
  bool enabled = true;
  Range mass_scale{0.9, 1.1};
  Range friction_scale{0.7, 1.3};
  Range motor_strength{0.9, 1.1};
  Range kp_scale{0.9, 1.1};
  Range kd_scale{0.9, 1.1};
  int delay_min = 0;
  int delay_max = 1;
  // Noise std per group; drawn uniform so the bound is sqrt(3) std.
  double noise_joint_pos = 0.01;
  double noise_joint_vel = 0.1;
  double noise_ang_vel = 0.05;
  double noise_gravity = 0.02;
  double push_velocity = 0.3;  // m/s, each base velocity component
  double push_interval = 1.0;  // s, 0 disables
  double obstacle_probability = 0.5;
  Range obstacle_height{0.0, 0.2};
  double obstacle_offset = 0.0;  // m, relative to the obstacle anchor

  void validate() const;
};

struct RandomizationSample {
  double mass_scale = 1.0;
  double friction_scale = 1.0;
  double motor_strength = 1.0;
  double kp_scale = 1.0;
  double kd_scale = 1.0;
  int delay_steps = 0;
  bool obstacle = false;
  double obstacle_height = 0.0;
  double obstacle_x = 0.0;

  bool operator==(const RandomizationSample&) const = default;
};

// Draws one episode's sample. The obstacle sits at `obstacle_anchor +
// cfg.obstacle_offset`.
RandomizationSample randomize(const RandomizationConfig& cfg, double obstacle_anchor,
                              std::mt19937_64& rng);

// x of the flight apex if the base rises more than 5 cm, else the middle of
// the reference's x range.
double obstacle_anchor(const Trajectory& ref);

// Raises everything from x onward by dh.
Terrain add_step(const Terrain& terrain, double x, double dh);

struct EnvConfig {
  RobotModel model;
  ActuatorConfig actuator;
  RewardConfig reward;
  ConstraintConfig constraints;
  RandomizationConfig randomization;
  double policy_rate = 50.0;
  int substeps = 4;
  double post_time = 1.5;            // s after the reference ends
  double rsi_probability = 0.5;
  double rsi_span = 0.9;             // fraction of frames eligible for RSI
  int rsi_retries = 10;
  double action_clip = 5.0;
  // Replaces the reference's terrain when set (flip-up box).
  std::optional<std::string> terrain_override;

  double sim_dt() const { return 1.0 / (policy_rate * substeps); }
  void validate() const;
};

struct StepInfo {
  bool terminated = false;
  bool timeout = false;
  std::optional<TerminationCause> cause;
  RewardTerms reward;
  double peak_power = 0.0;
  double peak_torque = 0.0;   // applied, body joints
  double touchdown_speed = 0.0;  // largest onset speed this step, 0 if none
};

struct EpisodeStats {
  std::uint64_t instance = 0;
  std::uint64_t episode = 0;
  std::size_t start_frame = 0;
  bool rsi_start = false;  // start drawn by the RSI branch
  int steps = 0;
  double ret = 0.0;
  bool success = false;
  std::optional<TerminationCause> cause;
  double peak_power = 0.0;
  double peak_torque = 0.0;
  double peak_touchdown_speed = 0.0;
  RandomizationSample sample;
};

std::string episode_csv_header();
std::string episode_csv_row(const EpisodeStats& e);

class FlipEnv {
 public:
  FlipEnv(std::shared_ptr<const EnvConfig> cfg, std::shared_ptr<const Trajectory> ref,
          std::uint64_t seed, std::uint64_t instance = 0);

  ObsVec reset();
  // Reset at a given frame with the nominal (unrandomized) sample; noise and
  // pushes still follow set_randomization.
  ObsVec reset_at(std::size_t frame);
  ObsVec step(const Vec3& action, double* reward, StepInfo* info);

  CriticObsVec critic_observation() const;
  const EnvConfig& config() const { return *cfg_; }
  const Trajectory& reference() const { return *ref_; }
  ObsVec observation() const { return last_obs_; }

  void set_constraints(const ActiveConstraints& c) { constraints_ = c; }
  const ActiveConstraints& constraints() const { return constraints_; }
  void set_smoothness_weight(double w) { smoothness_weight_ = w; }
  void set_randomization(bool on) { randomize_ = on; }
  void set_rsi(bool on) { rsi_ = on; }

  const RobotState& state() const { return state_; }
  const Terrain& terrain() const { return terrain_; }
  const RandomizationSample& sample() const { return sample_; }
  const EpisodeStats& episode() const { return stats_; }
  double time() const { return state_.time; }
  double end_time() const { return end_time_; }
  bool done() const { return done_; }
  int max_steps() const;
  std::mt19937_64& rng() { return rng_; }

 private:
  void draw_episode(bool randomize);
  RobotState start_state(std::size_t frame) const;
  ObsVec begin_episode(std::size_t frame);
  bool start_violates(const RobotState& s) const;
  ObsVec make_obs() const;

  std::shared_ptr<const EnvConfig> cfg_;
  std::shared_ptr<const Trajectory> ref_;
  std::mt19937_64 rng_;
  std::uint64_t instance_;
  std::uint64_t episodes_ = 0;
  Terrain base_terrain_;
  double anchor_ = 0.0;
  PhaseMap phase_map_;

  bool randomize_ = true;
  bool rsi_ = true;
  ActiveConstraints constraints_;
  double smoothness_weight_ = -1e-5;

  RobotModel model_;
  ActuatorConfig actuator_;
  Terrain terrain_;
  RandomizationSample sample_;
  ActionDelay delay_;
  RobotState state_;
  Vec3 prev_action_ = Vec3::Zero();
  std::array<bool, 2> in_contact_{};
  double end_time_ = 0.0;
  double next_push_ = 0.0;
  bool done_ = true;
  ObsVec last_obs_ = ObsVec::Zero();
  EpisodeStats stats_;
};

// N independent instances with seeds derived from one master seed. Finished
// episodes reset automatically.
class VecEnv {
 public:
  VecEnv(std::shared_ptr<const EnvConfig> cfg, std::shared_ptr<const Trajectory> ref,
         std::size_t n, std::uint64_t master_seed);

  std::size_t size() const { return envs_.size(); }
  // Columns are instances.
  Eigen::MatrixXd reset();
  Eigen::MatrixXd critic_observations() const;

  struct Step {
    Eigen::MatrixXd obs;             // after auto-reset
    Eigen::MatrixXd critic_obs;
    Eigen::VectorXd reward;
    std::vector<std::uint8_t> done;
    std::vector<std::uint8_t> timeout;
    Eigen::MatrixXd terminal_critic_obs;  // valid where done, before reset
  };
  Step step(const Eigen::MatrixXd& actions);

  void set_constraints(const ActiveConstraints& c);
  void set_smoothness_weight(double w);
  void set_randomization(bool on);
  void set_rsi(bool on);

  // Episodes finished since the last call.
  std::vector<EpisodeStats> drain_episodes();
  FlipEnv& env(std::size_t i) { return envs_[i]; }

 private:
  std::vector<FlipEnv> envs_;
  std::vector<EpisodeStats> finished_;
};

std::uint64_t instance_seed(std::uint64_t master, std::uint64_t index);

// A reference that stands still at the nominal ride height: the balance
// sanity task uses it together with balance_task_config().
Trajectory standing_reference(const RobotModel& model, double duration, double rate_hz);
EnvConfig balance_task_config();

// Runs one episode from frame 0 with randomization and noise off, recording
// the state at every policy tick before the action is applied.
struct RolloutResult {
  Trajectory trajectory;
  EpisodeStats stats;
};
RolloutResult record_rollout(FlipEnv& env, const std::function<Vec3(const ObsVec&)>& policy,
                             TrajectoryMeta meta);

}  // namespace imi
