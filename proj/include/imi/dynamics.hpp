#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace imi {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat7 = Eigen::Matrix<double, 7, 7>;

// Joint indices into RobotState::q / dq. Body joints first, wheels last.
enum Joint : int { kUpper = 0, kLower = 1, kRear = 2, kFront = 3 };

// Generalized coordinate layout used by the dynamics: base x, base z, base
// pitch, then the four joints in Joint order.
enum Coord : int { kX = 0, kZ = 1, kPitch = 2, kQUpper = 3, kQLower = 4, kQRear = 5, kQFront = 6 };

struct JointLimits {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double q) const { return q >= lo && q <= hi; }
};

// Planar five-body robot: bike-base with two wheels and a two-link boing
// (lower-body hinged on the base, upper-body hinged on the lower-body tip).
// Lengths in m, masses in kg, inertias about the out-of-plane axis in kg m^2.
struct RobotModel {
  double base_mass = 6.0;
  double base_inertia = 0.325;
  Vec2 base_com{0.0, 0.05};       // base frame, origin at axle midpoint
  Vec2 boing_anchor{0.0, 0.1};    // lower-body hinge, base frame

  double lower_mass = 3.0;
  double lower_inertia = 0.0225;
  double lower_length = 0.3;
  double lower_com = 0.15;        // along the link from its hinge

  double upper_mass = 5.0;
  double upper_inertia = 0.0375;
  double upper_length = 0.3;
  double upper_com = 0.15;

  double wheel_mass = 1.0;
  double wheel_inertia = 0.03;
  double rear_radius = 0.2;
  double front_radius = 0.2;
  double wheelbase = 0.8;

  JointLimits upper_limits{-2.4, 2.4};
  JointLimits lower_limits{-2.0, 2.0};

  double gravity = 9.81;

  double contact_stiffness = 2.0e4;
  double contact_damping = 2.0e2;
  double friction = 1.0;
  double tangential_damping = 150.0;  // viscous slip coefficient, N s/m

  // Penalty spring that keeps body joints near their limits.
  double limit_stiffness = 2000.0;
  double limit_damping = 10.0;
  double limit_slack = 0.5;

  double total_mass() const {
    return base_mass + lower_mass + upper_mass + 2.0 * wheel_mass;
  }
  Vec2 rear_axle() const { return {-0.5 * wheelbase, 0.0}; }
  Vec2 front_axle() const { return {0.5 * wheelbase, 0.0}; }
  const JointLimits& limits(Joint j) const { return j == kUpper ? upper_limits : lower_limits; }

  // Throws std::invalid_argument naming the first offending field.
  void validate() const;
};

struct RobotState {
  Vec2 base_pos = Vec2::Zero();   // axle midpoint, world x-z
  double pitch = 0.0;             // positive rotates +x toward +z
  Vec2 base_vel = Vec2::Zero();
  double pitch_rate = 0.0;
  Vec4 q = Vec4::Zero();          // upper, lower, rear, front (rad)
  Vec4 dq = Vec4::Zero();
  double time = 0.0;

  Vec7 positions() const;
  Vec7 velocities() const;
  void set_positions(const Vec7& p);
  void set_velocities(const Vec7& v);
  bool finite() const;
  std::string dump() const;

  // Gravity direction expressed in the base frame.
  Vec2 projected_gravity() const;
};

// Piecewise-constant height field. Height 0 applies from -inf until the
// first step; each step holds until the next.
class Terrain {
 public:
  struct Step {
    double x_start;
    double height;
  };

  Terrain() = default;
  explicit Terrain(std::vector<Step> steps);

  static Terrain flat() { return Terrain{}; }
  // Raised surface of the given height from x_start onward.
  static Terrain step_up(double x_start, double height);

  double height_at(double x) const;
  const std::vector<Step>& steps() const { return steps_; }
  bool is_flat() const;

  // Closest point on the terrain profile to p (the profile is the polyline
  // of horizontal treads and vertical risers).
  Vec2 closest_point(const Vec2& p) const;

  // "flat" or "step:x0:h0,x1:h1" form; parse throws on malformed text.
  std::string describe() const;
  static Terrain parse(const std::string& text);

  bool operator==(const Terrain& other) const;

 private:
  std::vector<Step> steps_;
};

struct WheelContact {
  bool in_contact = false;
  double penetration = 0.0;
  double normal_force = 0.0;      // >= 0
  double tangential_force = 0.0;  // signed along `tangent`
  double slip = 0.0;              // contact-point velocity along `tangent`
  Vec2 normal = Vec2::UnitY();
  Vec2 tangent = Vec2::UnitX();
  Vec2 point = Vec2::Zero();

  Vec2 force() const { return normal_force * normal + tangential_force * tangent; }
};

struct ContactForces {
  std::array<WheelContact, 2> wheel;  // rear, front
};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ContactForces contact_forces(const RobotModel& model, const RobotState& state,
                             const Terrain& terrain);

// Torques: upper-body, lower-body, rear-wheel. The front wheel is passive.
Vec7 forward_dynamics(const RobotModel& model, const RobotState& state,
                      const Vec3& joint_torques, const Terrain& terrain);

struct StepResult {
  RobotState state;
  ContactForces contacts;  // evaluated at the pre-step state
};

// Classical fourth-order Runge-Kutta step of size dt with the joint torques
// held over the step; deterministic.
StepResult step_detailed(const RobotModel& model, const RobotState& state,
                         const Vec3& joint_torques, const Terrain& terrain, double dt);

inline RobotState step(const RobotModel& model, const RobotState& state,
                       const Vec3& joint_torques, const Terrain& terrain, double dt) {
  return step_detailed(model, state, joint_torques, terrain, dt).state;
}

struct Momenta {
  Vec2 linear = Vec2::Zero();
  double angular_about_com = 0.0;
  double kinetic = 0.0;
  double potential = 0.0;
  double energy() const { return kinetic + potential; }
};

Momenta system_momenta(const RobotModel& model, const RobotState& state);

// World-frame kinematics of every body, computed by direct velocity
// propagation along the chain.
struct BodyKinematics {
  Vec2 pos;
  Vec2 vel;
  double angle;
  double omega;
};
enum Body : int { kBaseBody = 0, kLowerBody = 1, kUpperBody = 2, kRearWheel = 3, kFrontWheel = 4 };
std::array<BodyKinematics, 5> body_kinematics(const RobotModel& model, const RobotState& state);

Vec2 system_com(const RobotModel& model, const RobotState& state);

// Points on the base, lower-body and upper-body used for ground collision.
struct CollisionPoints {
  std::array<Vec2, 2> base;
  std::array<Vec2, 2> lower;
  std::array<Vec2, 2> upper;
};
CollisionPoints collision_points(const RobotModel& model, const RobotState& state);

Vec2 wheel_center(const RobotModel& model, const RobotState& state, int wheel);
Vec2 wheel_center_velocity(const RobotModel& model, const RobotState& state, int wheel);

// Rotation by angle a in the x-z plane.
inline Vec2 rotate(double a, const Vec2& v) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}
inline Vec2 perp(const Vec2& v) { return {-v.y(), v.x()}; }
inline double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Wrap to (-pi, pi].
double wrap_angle(double a);

}  // namespace imi
