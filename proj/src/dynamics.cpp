#include "imi/dynamics.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Cholesky>

namespace imi {

namespace {

constexpr double kPi = std::numbers::pi;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("invalid robot model: ") + what);
}

// One rigid offset in a kinematic chain: a body-fixed vector rotated by an
// absolute angle that is linear in the generalized coordinates.
struct ChainTerm {
  Vec7 angle;   // coefficients selecting pitch and joint coordinates
  Vec2 local;
};

// COM of a body as base position plus a sum of rotated offsets.
struct BodyChain {
  double mass;
  double inertia;
  Vec7 angle;
  std::array<ChainTerm, 3> terms;
  int n_terms;
};

Vec7 unit(int i) {
  Vec7 e = Vec7::Zero();
  e[i] = 1.0;
  return e;
}

std::array<BodyChain, 5> chains(const RobotModel& m) {
  const Vec7 a_base = unit(kPitch);
  const Vec7 a_lower = a_base + unit(kQLower);
  const Vec7 a_upper = a_lower + unit(kQUpper);
  const Vec7 a_rear = a_base + unit(kQRear);
  const Vec7 a_front = a_base + unit(kQFront);
  const Vec2 up = Vec2::UnitY();

  std::array<BodyChain, 5> c;
  c[kBaseBody] = {m.base_mass, m.base_inertia, a_base, {{{a_base, m.base_com}}}, 1};
  c[kLowerBody] = {m.lower_mass, m.lower_inertia, a_lower,
                   {{{a_base, m.boing_anchor}, {a_lower, m.lower_com * up}}}, 2};
  c[kUpperBody] = {m.upper_mass, m.upper_inertia, a_upper,
                   {{{a_base, m.boing_anchor}, {a_lower, m.lower_length * up},
                     {a_upper, m.upper_com * up}}}, 3};
  c[kRearWheel] = {m.wheel_mass, m.wheel_inertia, a_rear, {{{a_base, m.rear_axle()}}}, 1};
  c[kFrontWheel] = {m.wheel_mass, m.wheel_inertia, a_front, {{{a_base, m.front_axle()}}}, 1};
  return c;
}

// Point Jacobian (2x7) and velocity-product bias (J-dot times q-dot).
struct PointKinematics {
  Vec2 pos;
  Eigen::Matrix<double, 2, 7> jac;
  Vec2 bias;
};

PointKinematics chain_point(const BodyChain& body, const Vec7& q, const Vec7& dq) {
  PointKinematics k;
  k.pos = Vec2(q[kX], q[kZ]);
  k.jac.setZero();
  k.jac(0, kX) = 1.0;
  k.jac(1, kZ) = 1.0;
  k.bias.setZero();
  for (int i = 0; i < body.n_terms; ++i) {
    const ChainTerm& t = body.terms[i];
    const double theta = t.angle.dot(q);
    const double theta_dot = t.angle.dot(dq);
    const Vec2 r = rotate(theta, t.local);
    k.pos += r;
    k.jac += perp(r) * t.angle.transpose();
    k.bias -= theta_dot * theta_dot * r;
  }
  return k;
}

double limit_torque(const RobotModel& m, const JointLimits& lim, double q, double dq) {
  if (q > lim.hi) return std::min(0.0, -m.limit_stiffness * (q - lim.hi) - m.limit_damping * dq);
  if (q < lim.lo) return std::max(0.0, -m.limit_stiffness * (q - lim.lo) - m.limit_damping * dq);
  return 0.0;
}

double limit_energy(const RobotModel& m, const JointLimits& lim, double q) {
  const double excess = q > lim.hi ? q - lim.hi : (q < lim.lo ? lim.lo - q : 0.0);
  return 0.5 * m.limit_stiffness * excess * excess;
}

double wheel_radius(const RobotModel& m, int wheel) {
  return wheel == 0 ? m.rear_radius : m.front_radius;
}

WheelContact wheel_contact(const RobotModel& m, const RobotState& s, const Terrain& terrain,
                           int wheel) {
  WheelContact c;
  const double radius = wheel_radius(m, wheel);
  const Vec2 center = wheel_center(m, s, wheel);
  const Vec2 closest = terrain.closest_point(center);
  const Vec2 d = center - closest;
  const double dist = d.norm();
  c.penetration = radius - dist;
  if (c.penetration <= 0.0) {
    c.penetration = 0.0;
    return c;
  }
  c.in_contact = true;
  c.normal = dist > 1e-12 ? Vec2(d / dist) : Vec2::UnitY();
  c.tangent = Vec2(c.normal.y(), -c.normal.x());
  c.point = center - radius * c.normal;

  const double omega = s.pitch_rate + s.dq[wheel == 0 ? kRear : kFront];
  const Vec2 v_point = wheel_center_velocity(m, s, wheel) + omega * perp(c.point - center);
  const double gap_rate = v_point.dot(c.normal);
  c.normal_force = std::max(
      0.0, m.contact_stiffness * c.penetration + m.contact_damping * std::max(0.0, -gap_rate));
  c.slip = v_point.dot(c.tangent);
  const double cap = m.friction * c.normal_force;
  const double viscous = m.tangential_damping * std::abs(c.slip);
  c.tangential_force = -std::copysign(std::min(viscous, cap), c.slip);
  if (c.slip == 0.0) c.tangential_force = 0.0;
  return c;
}

struct Evaluation {
  Vec7 acc;
  ContactForces contacts;
};

Evaluation evaluate(const RobotModel& m, const RobotState& s, const Vec3& tau,
                    const Terrain& terrain) {
  if (!s.finite() || !tau.allFinite()) {
    throw SimulationError("non-finite dynamics input\n" + s.dump());
  }
  const Vec7 q = s.positions();
  const Vec7 dq = s.velocities();
  const auto bodies = chains(m);

  Mat7 mass = Mat7::Zero();
  Vec7 rhs = Vec7::Zero();
  const Vec2 gravity(0.0, -m.gravity);
  for (const BodyChain& b : bodies) {
    const PointKinematics k = chain_point(b, q, dq);
    mass.noalias() += b.mass * k.jac.transpose() * k.jac;
    mass.noalias() += b.inertia * b.angle * b.angle.transpose();
    rhs.noalias() += k.jac.transpose() * (b.mass * (gravity - k.bias));
  }

  rhs[kQUpper] += tau[0] + limit_torque(m, m.upper_limits, s.q[kUpper], s.dq[kUpper]);
  rhs[kQLower] += tau[1] + limit_torque(m, m.lower_limits, s.q[kLower], s.dq[kLower]);
  rhs[kQRear] += tau[2];

  Evaluation e;
  e.contacts = contact_forces(m, s, terrain);
  for (int w = 0; w < 2; ++w) {
    const WheelContact& c = e.contacts.wheel[w];
    if (!c.in_contact) continue;
    const BodyChain& b = bodies[w == 0 ? kRearWheel : kFrontWheel];
    PointKinematics k = chain_point(b, q, dq);
    // Contact point rides on the wheel body, which adds the wheel spin column.
    k.jac += perp(c.point - k.pos) * b.angle.transpose();
    rhs.noalias() += k.jac.transpose() * c.force();
  }

  Eigen::LDLT<Mat7> ldlt(mass);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw SimulationError("singular mass matrix\n" + s.dump());
  }
  e.acc = ldlt.solve(rhs);
  return e;
}

}  // namespace

void RobotModel::validate() const {
  require(base_mass > 0 && lower_mass > 0 && upper_mass > 0 && wheel_mass > 0, "mass <= 0");
  require(base_inertia > 0 && lower_inertia > 0 && upper_inertia > 0 && wheel_inertia > 0,
          "inertia <= 0");
  require(rear_radius > 0 && front_radius > 0, "wheel radius <= 0");
  require(wheelbase > 0 && lower_length > 0 && upper_length > 0, "length <= 0");
  require(contact_stiffness > 0 && contact_damping > 0, "contact stiffness/damping <= 0");
  require(friction >= 0, "friction < 0");
  require(tangential_damping > 0, "tangential damping <= 0");
  require(upper_limits.lo < upper_limits.hi, "upper-body limits out of order");
  require(lower_limits.lo < lower_limits.hi, "lower-body limits out of order");
  require(gravity >= 0, "gravity < 0");
  require(limit_stiffness >= 0 && limit_damping >= 0 && limit_slack > 0, "limit spring");
}

Vec7 RobotState::positions() const {
  Vec7 p;
  p << base_pos.x(), base_pos.y(), pitch, q[0], q[1], q[2], q[3];
  return p;
}

Vec7 RobotState::velocities() const {
  Vec7 v;
  v << base_vel.x(), base_vel.y(), pitch_rate, dq[0], dq[1], dq[2], dq[3];
  return v;
}

void RobotState::set_positions(const Vec7& p) {
  base_pos = p.head<2>();
  pitch = p[kPitch];
  q = p.tail<4>();
}

void RobotState::set_velocities(const Vec7& v) {
  base_vel = v.head<2>();
  pitch_rate = v[kPitch];
  dq = v.tail<4>();
}

bool RobotState::finite() const {
  return positions().allFinite() && velocities().allFinite() && std::isfinite(time);
}

std::string RobotState::dump() const {
  std::ostringstream os;
  os.precision(17);
  os << "t=" << time << " pos=[" << positions().transpose() << "] vel=["
     << velocities().transpose() << "]";
  return os.str();
}

Vec2 RobotState::projected_gravity() const {
  return {-std::sin(pitch), -std::cos(pitch)};
}

Terrain::Terrain(std::vector<Step> steps) : steps_(std::move(steps)) {
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (!std::isfinite(steps_[i].x_start) || !std::isfinite(steps_[i].height)) {
      throw std::invalid_argument("terrain: non-finite step");
    }
    if (steps_[i].height < 0.0) throw std::invalid_argument("terrain: negative height");
    if (i > 0 && steps_[i].x_start <= steps_[i - 1].x_start) {
      throw std::invalid_argument("terrain: step x not strictly increasing");
    }
  }
}

Terrain Terrain::step_up(double x_start, double height) {
  if (height == 0.0) return flat();
  return Terrain({{x_start, height}});
}

double Terrain::height_at(double x) const {
  double h = 0.0;
  for (const Step& s : steps_) {
    if (x < s.x_start) break;
    h = s.height;
  }
  return h;
}

bool Terrain::is_flat() const {
  return std::all_of(steps_.begin(), steps_.end(), [](const Step& s) { return s.height == 0.0; });
}

Vec2 Terrain::closest_point(const Vec2& p) const {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Vec2 best(p.x(), height_at(p.x()));
  double best_d2 = (p - best).squaredNorm();
  auto consider = [&](const Vec2& c) {
    const double d2 = (p - c).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = c;
    }
  };
  double x0 = -kInf;
  double h = 0.0;
  for (std::size_t i = 0; i <= steps_.size(); ++i) {
    const double x1 = i < steps_.size() ? steps_[i].x_start : kInf;
    consider(Vec2(std::clamp(p.x(), x0, x1), h));
    if (i < steps_.size()) {
      const double h_next = steps_[i].height;
      const double lo = std::min(h, h_next), hi = std::max(h, h_next);
      consider(Vec2(x1, std::clamp(p.y(), lo, hi)));
      h = h_next;
      x0 = x1;
    }
  }
  return best;
}

std::string Terrain::describe() const {
  if (steps_.empty()) return "flat";
  std::string out = "step:";
  char buf[64];
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (i) out += ',';
    auto r = std::to_chars(buf, buf + sizeof(buf), steps_[i].x_start);
    out.append(buf, r.ptr);
    out += ':';
    r = std::to_chars(buf, buf + sizeof(buf), steps_[i].height);
    out.append(buf, r.ptr);
  }
  return out;
}

Terrain Terrain::parse(const std::string& text) {
  if (text == "flat" || text.empty()) return flat();
  if (text.rfind("step:", 0) != 0) throw std::invalid_argument("terrain: unknown form '" + text + "'");
  std::vector<Step> steps;
  std::stringstream ss(text.substr(5));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("terrain: bad step '" + item + "'");
    Step s{};
    const char* b = item.data();
    auto r1 = std::from_chars(b, b + colon, s.x_start);
    auto r2 = std::from_chars(b + colon + 1, b + item.size(), s.height);
    if (r1.ec != std::errc() || r1.ptr != b + colon || r2.ec != std::errc() ||
        r2.ptr != b + item.size()) {
      throw std::invalid_argument("terrain: bad step '" + item + "'");
    }
    steps.push_back(s);
  }
  return Terrain(std::move(steps));
}

bool Terrain::operator==(const Terrain& other) const {
  if (steps_.size() != other.steps_.size()) return false;
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (steps_[i].x_start != other.steps_[i].x_start || steps_[i].height != other.steps_[i].height) {
      return false;
    }
  }
  return true;
}

Vec2 wheel_center(const RobotModel& m, const RobotState& s, int wheel) {
  return s.base_pos + rotate(s.pitch, wheel == 0 ? m.rear_axle() : m.front_axle());
}

Vec2 wheel_center_velocity(const RobotModel& m, const RobotState& s, int wheel) {
  return s.base_vel + s.pitch_rate * perp(rotate(s.pitch, wheel == 0 ? m.rear_axle() : m.front_axle()));
}

ContactForces contact_forces(const RobotModel& model, const RobotState& state,
                             const Terrain& terrain) {
  ContactForces f;
  f.wheel[0] = wheel_contact(model, state, terrain, 0);
  f.wheel[1] = wheel_contact(model, state, terrain, 1);
  return f;
}

Vec7 forward_dynamics(const RobotModel& model, const RobotState& state,
                      const Vec3& joint_torques, const Terrain& terrain) {
  return evaluate(model, state, joint_torques, terrain).acc;
}

namespace {

// The joint-limit spring is stiff and only piecewise smooth, and fast joint
// rotation makes the Coriolis terms hard on a single RK4 step. Such steps are
// split so no body angle turns more than kMaxTurn per substep.
constexpr int kLimitSubsteps = 8;
constexpr int kMaxSubsteps = 64;
constexpr double kMaxTurn = 0.05;  // rad

int substeps(const RobotModel& m, const RobotState& s, const Vec7& acc, double dt) {
  int n = 1;
  for (Joint j : {kUpper, kLower}) {
    const JointLimits& lim = m.limits(j);
    const double reach = std::abs(s.dq[j]) * dt + 0.5 * std::abs(acc[kQUpper + j]) * dt * dt + 0.01;
    if (s.q[j] > lim.hi - reach || s.q[j] < lim.lo + reach) n = kLimitSubsteps;
  }
  double rate = std::abs(s.pitch_rate);
  for (Joint j : {kUpper, kLower}) rate = std::max(rate, std::abs(s.dq[j]));
  const double turn = rate * dt / kMaxTurn;
  if (turn > n) n = turn >= kMaxSubsteps ? kMaxSubsteps : static_cast<int>(std::ceil(turn));
  return n;
}

RobotState rk4(const RobotModel& model, const RobotState& state, const Vec7& a1,
               const Vec3& joint_torques, const Terrain& terrain, double dt) {
  const Vec7 q0 = state.positions();
  const Vec7 v0 = state.velocities();
  RobotState probe = state;
  auto stage = [&](const Vec7& q, const Vec7& v) {
    probe.set_positions(q);
    probe.set_velocities(v);
    return evaluate(model, probe, joint_torques, terrain).acc;
  };
  const Vec7 v2 = v0 + 0.5 * dt * a1;
  const Vec7 a2 = stage(q0 + 0.5 * dt * v0, v2);
  const Vec7 v3 = v0 + 0.5 * dt * a2;
  const Vec7 a3 = stage(q0 + 0.5 * dt * v2, v3);
  const Vec7 v4 = v0 + dt * a3;
  const Vec7 a4 = stage(q0 + dt * v3, v4);

  RobotState out = state;
  out.set_positions(q0 + dt / 6.0 * (v0 + 2.0 * v2 + 2.0 * v3 + v4));
  out.set_velocities(v0 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4));
  return out;
}

}  // namespace

StepResult step_detailed(const RobotModel& model, const RobotState& state,
                         const Vec3& joint_torques, const Terrain& terrain, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
  const Evaluation first = evaluate(model, state, joint_torques, terrain);
  StepResult out{state, first.contacts};
  const int n = substeps(model, state, first.acc, dt);
  const double h = dt / n;
  out.state = rk4(model, state, first.acc, joint_torques, terrain, h);
  for (int i = 1; i < n && out.state.finite(); ++i) {
    const Vec7 a = evaluate(model, out.state, joint_torques, terrain).acc;
    out.state = rk4(model, out.state, a, joint_torques, terrain, h);
  }
  out.state.time = state.time + dt;

  if (!out.state.finite()) {
    throw SimulationError("non-finite state after step\nbefore: " + state.dump() +
                          "\nafter: " + out.state.dump());
  }
  for (Joint j : {kUpper, kLower}) {
    const JointLimits& lim = model.limits(j);
    const double q = out.state.q[j];
    if (q < lim.lo - model.limit_slack || q > lim.hi + model.limit_slack) {
      throw SimulationError("joint beyond limit slack\n" + out.state.dump());
    }
  }
  return out;
}

std::array<BodyKinematics, 5> body_kinematics(const RobotModel& m, const RobotState& s) {
  std::array<BodyKinematics, 5> out;
  const Vec2 up = Vec2::UnitY();
  auto attach = [](const Vec2& pos, const Vec2& vel, double angle, double omega,
                   const Vec2& local) {
    const Vec2 r = rotate(angle, local);
    return std::pair<Vec2, Vec2>{pos + r, vel + omega * perp(r)};
  };

  const double phi = s.pitch, w = s.pitch_rate;
  auto [base_com, base_vel] = attach(s.base_pos, s.base_vel, phi, w, m.base_com);
  out[kBaseBody] = {base_com, base_vel, phi, w};

  auto [hinge, hinge_vel] = attach(s.base_pos, s.base_vel, phi, w, m.boing_anchor);
  const double a_lower = phi + s.q[kLower], w_lower = w + s.dq[kLower];
  auto [lower_com, lower_vel] = attach(hinge, hinge_vel, a_lower, w_lower, m.lower_com * up);
  out[kLowerBody] = {lower_com, lower_vel, a_lower, w_lower};

  auto [knee, knee_vel] = attach(hinge, hinge_vel, a_lower, w_lower, m.lower_length * up);
  const double a_upper = a_lower + s.q[kUpper], w_upper = w_lower + s.dq[kUpper];
  auto [upper_com, upper_vel] = attach(knee, knee_vel, a_upper, w_upper, m.upper_com * up);
  out[kUpperBody] = {upper_com, upper_vel, a_upper, w_upper};

  auto [rear, rear_vel] = attach(s.base_pos, s.base_vel, phi, w, m.rear_axle());
  out[kRearWheel] = {rear, rear_vel, phi + s.q[kRear], w + s.dq[kRear]};
  auto [front, front_vel] = attach(s.base_pos, s.base_vel, phi, w, m.front_axle());
  out[kFrontWheel] = {front, front_vel, phi + s.q[kFront], w + s.dq[kFront]};
  return out;
}

namespace {
std::array<double, 5> body_masses(const RobotModel& m) {
  return {m.base_mass, m.lower_mass, m.upper_mass, m.wheel_mass, m.wheel_mass};
}
std::array<double, 5> body_inertias(const RobotModel& m) {
  return {m.base_inertia, m.lower_inertia, m.upper_inertia, m.wheel_inertia, m.wheel_inertia};
}
}  // namespace

Vec2 system_com(const RobotModel& m, const RobotState& s) {
  const auto bodies = body_kinematics(m, s);
  const auto mass = body_masses(m);
  Vec2 c = Vec2::Zero();
  for (int i = 0; i < 5; ++i) c += mass[i] * bodies[i].pos;
  return c / m.total_mass();
}

Momenta system_momenta(const RobotModel& m, const RobotState& s) {
  const auto bodies = body_kinematics(m, s);
  const auto mass = body_masses(m);
  const auto inertia = body_inertias(m);
  const double total = m.total_mass();

  Vec2 com = Vec2::Zero();
  Momenta out;
  for (int i = 0; i < 5; ++i) {
    com += mass[i] * bodies[i].pos;
    out.linear += mass[i] * bodies[i].vel;
  }
  com /= total;
  const Vec2 com_vel = out.linear / total;

  for (int i = 0; i < 5; ++i) {
    const BodyKinematics& b = bodies[i];
    out.angular_about_com += mass[i] * cross(b.pos - com, b.vel - com_vel) + inertia[i] * b.omega;
    out.kinetic += 0.5 * mass[i] * b.vel.squaredNorm() + 0.5 * inertia[i] * b.omega * b.omega;
    out.potential += mass[i] * m.gravity * b.pos.y();
  }
  out.potential += limit_energy(m, m.upper_limits, s.q[kUpper]);
  out.potential += limit_energy(m, m.lower_limits, s.q[kLower]);
  return out;
}

CollisionPoints collision_points(const RobotModel& m, const RobotState& s) {
  const Vec2 up = Vec2::UnitY();
  const Vec2 hinge = s.base_pos + rotate(s.pitch, m.boing_anchor);
  const double a_lower = s.pitch + s.q[kLower];
  const Vec2 knee = hinge + rotate(a_lower, m.lower_length * up);
  const Vec2 head = knee + rotate(a_lower + s.q[kUpper], m.upper_length * up);
  CollisionPoints p;
  p.base = {s.base_pos, hinge};
  p.lower = {0.5 * (hinge + knee), knee};
  p.upper = {0.5 * (knee + head), head};
  return p;
}

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

}  // namespace imi
