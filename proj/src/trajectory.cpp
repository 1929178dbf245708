#include "imi/trajectory.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

namespace imi {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::array<double*, 12> fields(Frame& f) {
  return {&f.base_x, &f.base_z, &f.base_pitch, &f.q_upper, &f.q_lower, &f.dq_upper,
          &f.dq_lower, &f.dq_rear, &f.dq_front, &f.v_x, &f.v_z, &f.pitch_rate};
}

std::array<double, 12> values(const Frame& f) {
  return {f.base_x, f.base_z, f.base_pitch, f.q_upper, f.q_lower, f.dq_upper,
          f.dq_lower, f.dq_rear, f.dq_front, f.v_x, f.v_z, f.pitch_rate};
}

void append_number(std::string& out, double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, r.ptr);
}

std::string number(double v) {
  std::string s;
  append_number(s, v);
  return s;
}

double min_jerk(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
}

// 0 -> 1 over [a, b], held, then 1 -> 0 over [c, d]; fractions of flight.
double tuck_profile(double s) {
  constexpr double a = 0.05, b = 0.4, c = 0.8, d = 1.0;
  if (s <= a || s >= d) return 0.0;
  if (s < b) return min_jerk((s - a) / (b - a));
  if (s <= c) return 1.0;
  return 1.0 - min_jerk((s - c) / (d - c));
}

// Central differences, one-sided at the ends.
std::vector<double> differentiate(const std::vector<double>& x, double rate) {
  const std::size_t n = x.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == 0) {
      d[i] = (x[1] - x[0]) * rate;
    } else if (i + 1 == n) {
      d[i] = (x[i] - x[i - 1]) * rate;
    } else {
      d[i] = (x[i + 1] - x[i - 1]) * 0.5 * rate;
    }
  }
  return d;
}

std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

bool Frame::finite() const {
  const auto v = values(*this);
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool TrajectoryMeta::is_root() const {
  return source == "synthetic" || source.rfind("rollout:", 0) == 0;
}

Trajectory::Trajectory(double rate_hz, std::vector<Frame> frames, TrajectoryMeta meta)
    : rate_hz_(rate_hz), frames_(std::move(frames)), meta_(std::move(meta)) {
  if (!(rate_hz_ > 0.0) || !std::isfinite(rate_hz_)) {
    throw std::invalid_argument("trajectory: rate must be positive");
  }
  if (frames_.size() < 2) throw std::invalid_argument("trajectory: needs at least 2 frames");
  for (std::size_t i = 0; i < frames_.size(); ++i) {
    if (!frames_[i].finite()) {
      throw std::invalid_argument("trajectory: non-finite frame " + std::to_string(i));
    }
  }
}

double phase(double t, const PhaseMap& map) {
  return std::min(t / map.ref_duration, 1.0);
}

Frame sample(const Trajectory& traj, double t) {
  const double duration = traj.duration();
  constexpr double kSlack = 1e-9;
  if (!(t >= -kSlack && t <= duration + kSlack)) {
    throw std::out_of_range("trajectory sample at t=" + number(t) + " outside [0, " +
                            number(duration) + "]");
  }
  double pos = std::clamp(t, 0.0, duration) * traj.rate_hz();
  // i / rate * rate is not always exactly i.
  if (std::abs(pos - std::round(pos)) < 1e-9) pos = std::round(pos);
  const std::size_t i = std::min(static_cast<std::size_t>(pos), traj.size() - 2);
  const double alpha = pos - static_cast<double>(i);
  if (alpha == 0.0) return traj[i];
  if (alpha == 1.0) return traj[i + 1];

  const auto a = values(traj[i]);
  const auto b = values(traj[i + 1]);
  Frame out;
  auto dst = fields(out);
  for (std::size_t k = 0; k < dst.size(); ++k) *dst[k] = a[k] + alpha * (b[k] - a[k]);
  out.base_pitch = a[2] + alpha * wrap_angle(b[2] - a[2]);
  return out;
}

Trajectory trim(const Trajectory& traj, std::size_t begin, std::size_t end) {
  if (!(begin < end) || end > traj.size()) {
    throw std::invalid_argument("trim: invalid range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for " + std::to_string(traj.size()) +
                                " frames");
  }
  if (end - begin < 2) throw std::invalid_argument("trim: result must keep at least 2 frames");
  std::vector<Frame> frames(traj.frames().begin() + static_cast<std::ptrdiff_t>(begin),
                            traj.frames().begin() + static_cast<std::ptrdiff_t>(end));
  TrajectoryMeta meta = traj.meta();
  meta.parent = traj.meta().label;
  meta.label = traj.meta().label + "~trim";
  meta.source = "trim:" + std::to_string(begin) + ":" + std::to_string(end);
  return Trajectory(traj.rate_hz(), std::move(frames), std::move(meta));
}

Trajectory translate(const Trajectory& traj, double dx, double dz) {
  std::vector<Frame> frames = traj.frames();
  for (Frame& f : frames) {
    f.base_x += dx;
    f.base_z += dz;
  }
  TrajectoryMeta meta = traj.meta();
  meta.parent = traj.meta().label;
  meta.label = traj.meta().label + "~shift";
  meta.source = "translate:" + number(dx) + ":" + number(dz);
  return Trajectory(traj.rate_hz(), std::move(frames), std::move(meta));
}

std::size_t auto_start_index(const Trajectory& traj, double vx_threshold) {
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (traj[i].v_x >= vx_threshold) return i;
  }
  throw std::invalid_argument("auto-start: no frame reaches v_x >= " + number(vx_threshold));
}

std::optional<std::size_t> touchdown_index(const Trajectory& traj, double clearance) {
  std::size_t apex = 0;
  for (std::size_t i = 1; i < traj.size(); ++i) {
    if (traj[i].base_z > traj[apex].base_z) apex = i;
  }
  if (traj[apex].base_z - traj[0].base_z < clearance) return std::nullopt;
  for (std::size_t i = apex + 1; i < traj.size(); ++i) {
    if (traj[i].v_z > traj[i - 1].v_z) return i;
  }
  return std::nullopt;
}

double joint_limit_margin(const Trajectory& traj, const RobotModel& model) {
  double margin = std::numeric_limits<double>::infinity();
  for (const Frame& f : traj.frames()) {
    margin = std::min({margin, f.q_upper - model.upper_limits.lo, model.upper_limits.hi - f.q_upper,
                       f.q_lower - model.lower_limits.lo, model.lower_limits.hi - f.q_lower});
  }
  return margin;
}

double FlipParams::takeoff_vz() const {
  const double t = flight_duration;
  return (landing_height - start_height + 0.5 * gravity * t * t) / t;
}

double FlipParams::apex_height() const {
  const double vz = takeoff_vz();
  return vz > 0.0 ? vz * vz / (2.0 * gravity) : 0.0;
}

Trajectory synth_flip_reference(const FlipParams& p) {
  if (!(p.flight_duration > 0.0)) throw std::invalid_argument("synth: flight duration must be > 0");
  if (!(p.drive_speed > 0.0)) throw std::invalid_argument("synth: drive speed must be > 0");
  if (!(p.drive_duration > 0.0)) throw std::invalid_argument("synth: drive duration must be > 0");
  if (!(p.landing_duration >= 0.0)) throw std::invalid_argument("synth: landing duration < 0");
  if (!(p.rate_hz > 0.0) || !(p.wheel_radius > 0.0)) {
    throw std::invalid_argument("synth: rate and wheel radius must be > 0");
  }
  if (p.start_height < 0.0 || p.landing_height < 0.0) {
    throw std::invalid_argument("synth: heights must be >= 0");
  }

  const double t_takeoff = p.drive_duration;
  const double t_land = t_takeoff + p.flight_duration;
  const double total = t_land + p.landing_duration;
  const auto n = static_cast<std::size_t>(std::llround(total * p.rate_hz)) + 1;
  const double z0 = p.start_height + p.wheel_radius;
  const double z_land = p.landing_height + p.wheel_radius;
  const double vz0 = p.takeoff_vz();

  std::vector<double> x(n), z(n), pitch(n), qu(n), ql(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / p.rate_hz;
    x[i] = p.drive_speed * t;
    if (t <= t_takeoff) {
      z[i] = z0;
      pitch[i] = 0.0;
    } else if (t < t_land) {
      const double tf = t - t_takeoff;
      z[i] = z0 + vz0 * tf - 0.5 * p.gravity * tf * tf;
      const double s = tf / p.flight_duration;
      pitch[i] = -kTwoPi * min_jerk(s);
      qu[i] = p.tuck_upper * tuck_profile(s);
      ql[i] = p.tuck_lower * tuck_profile(s);
    } else {
      z[i] = z_land;
      pitch[i] = -kTwoPi;
    }
  }

  const auto vx = differentiate(x, p.rate_hz);
  const auto vz = differentiate(z, p.rate_hz);
  const auto wy = differentiate(pitch, p.rate_hz);
  const auto dqu = differentiate(qu, p.rate_hz);
  const auto dql = differentiate(ql, p.rate_hz);

  std::vector<Frame> frames(n);
  for (std::size_t i = 0; i < n; ++i) {
    Frame& f = frames[i];
    f.base_x = x[i];
    f.base_z = z[i];
    f.base_pitch = pitch[i];
    f.q_upper = qu[i];
    f.q_lower = ql[i];
    f.dq_upper = dqu[i];
    f.dq_lower = dql[i];
    f.v_x = vx[i];
    f.v_z = vz[i];
    f.pitch_rate = wy[i];
    f.dq_rear = -vx[i] / p.wheel_radius - wy[i];
    f.dq_front = f.dq_rear;
  }
  TrajectoryMeta meta;
  meta.label = p.label;
  meta.source = "synthetic";
  if (p.start_height > 0.0 || p.landing_height > 0.0) {
    // Edge under the middle of the flight; a raised start sits on a block
    // that extends well behind the origin.
    const double edge = p.drive_speed * (t_takeoff + 0.5 * p.flight_duration);
    std::vector<Terrain::Step> steps;
    if (p.start_height > 0.0) steps.push_back({-1000.0, p.start_height});
    steps.push_back({edge, p.landing_height});
    meta.terrain = Terrain(std::move(steps)).describe();
  }
  return Trajectory(p.rate_hz, std::move(frames), std::move(meta));
}

void RolloutRecorder::record(const RobotState& s) { frames_.push_back(frame_from_state(s)); }

Trajectory RolloutRecorder::finish(TrajectoryMeta meta) const {
  return Trajectory(rate_hz_, frames_, std::move(meta));
}

Frame frame_from_state(const RobotState& s) {
  Frame f;
  f.base_x = s.base_pos.x();
  f.base_z = s.base_pos.y();
  f.base_pitch = s.pitch;
  f.q_upper = s.q[kUpper];
  f.q_lower = s.q[kLower];
  f.dq_upper = s.dq[kUpper];
  f.dq_lower = s.dq[kLower];
  f.dq_rear = s.dq[kRear];
  f.dq_front = s.dq[kFront];
  f.v_x = s.base_vel.x();
  f.v_z = s.base_vel.y();
  f.pitch_rate = s.pitch_rate;
  return f;
}

RobotState state_from_frame(const Frame& f) {
  RobotState s;
  s.base_pos = {f.base_x, f.base_z};
  s.pitch = f.base_pitch;
  s.base_vel = {f.v_x, f.v_z};
  s.pitch_rate = f.pitch_rate;
  s.q = {f.q_upper, f.q_lower, 0.0, 0.0};
  s.dq = {f.dq_upper, f.dq_lower, f.dq_rear, f.dq_front};
  return s;
}

TrajectoryParseError::TrajectoryParseError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

std::string to_csv(const Trajectory& traj) {
  std::string out;
  out += "# rate_hz: " + number(traj.rate_hz()) + "\n";
  out += "# label: " + traj.meta().label + "\n";
  out += "# source: " + traj.meta().source + "\n";
  out += "# parent: " + traj.meta().parent + "\n";
  out += "# terrain: " + traj.meta().terrain + "\n";
  for (std::size_t c = 0; c < kTrajectoryColumns.size(); ++c) {
    if (c) out += ',';
    out += kTrajectoryColumns[c];
  }
  out += '\n';
  for (std::size_t i = 0; i < traj.size(); ++i) {
    append_number(out, traj.time(i));
    for (double v : values(traj[i])) {
      out += ',';
      append_number(out, v);
    }
    out += '\n';
  }
  return out;
}

Trajectory from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::string> header;
  bool have_columns = false;
  std::vector<Frame> frames;
  std::vector<double> times;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (have_columns) throw TrajectoryParseError(line_no, "metadata after column header");
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw TrajectoryParseError(line_no, "metadata needs 'key: value'");
      const std::string key = trim_ws(line.substr(1, colon - 1));
      static const std::set<std::string> kKeys = {"rate_hz", "label", "source", "parent", "terrain"};
      if (!kKeys.count(key)) throw TrajectoryParseError(line_no, "unknown metadata key '" + key + "'");
      header[key] = trim_ws(line.substr(colon + 1));
      continue;
    }
    if (!have_columns) {
      std::string expected;
      for (std::size_t c = 0; c < kTrajectoryColumns.size(); ++c) {
        if (c) expected += ',';
        expected += kTrajectoryColumns[c];
      }
      if (trim_ws(line) != expected) throw TrajectoryParseError(line_no, "expected columns: " + expected);
      have_columns = true;
      continue;
    }
    std::array<double, 13> row{};
    const char* p = line.data();
    const char* end = p + line.size();
    for (std::size_t c = 0; c < row.size(); ++c) {
      const auto r = std::from_chars(p, end, row[c]);
      if (r.ec != std::errc()) throw TrajectoryParseError(line_no, "bad number in column " + std::string(kTrajectoryColumns[c]));
      p = r.ptr;
      if (c + 1 < row.size()) {
        if (p == end || *p != ',') throw TrajectoryParseError(line_no, "expected 13 columns");
        ++p;
      }
    }
    if (p != end) throw TrajectoryParseError(line_no, "trailing data");
    Frame f;
    auto dst = fields(f);
    for (std::size_t k = 0; k < dst.size(); ++k) *dst[k] = row[k + 1];
    if (!f.finite() || !std::isfinite(row[0])) throw TrajectoryParseError(line_no, "non-finite value");
    times.push_back(row[0]);
    frames.push_back(f);
    if (!header.count("rate_hz")) throw TrajectoryParseError(line_no, "missing rate_hz metadata");
    double rate = 0.0;
    const std::string& rate_text = header["rate_hz"];
    const auto rr = std::from_chars(rate_text.data(), rate_text.data() + rate_text.size(), rate);
    if (rr.ec != std::errc() || !(rate > 0.0)) throw TrajectoryParseError(line_no, "bad rate_hz");
    const double expected_t = static_cast<double>(frames.size() - 1) / rate;
    if (std::abs(row[0] - expected_t) > 1e-9 * std::max(1.0, expected_t)) {
      throw TrajectoryParseError(line_no, "non-uniform timestamp " + number(row[0]) +
                                              " (expected " + number(expected_t) + ")");
    }
  }
  if (!have_columns) throw TrajectoryParseError(line_no, "missing column header");
  if (frames.size() < 2) throw TrajectoryParseError(line_no, "need at least 2 frames");

  double rate = 0.0;
  std::from_chars(header["rate_hz"].data(), header["rate_hz"].data() + header["rate_hz"].size(), rate);
  TrajectoryMeta meta;
  meta.label = header["label"];
  meta.source = header.count("source") ? header["source"] : "synthetic";
  meta.parent = header["parent"];
  meta.terrain = header.count("terrain") && !header["terrain"].empty() ? header["terrain"] : "flat";
  return Trajectory(rate, std::move(frames), std::move(meta));
}

void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_csv(traj);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

void check_lineage(const std::map<std::string, TrajectoryMeta>& by_label) {
  for (const auto& [label, meta] : by_label) {
    std::set<std::string> seen{label};
    const TrajectoryMeta* cur = &meta;
    while (!cur->is_root()) {
      const auto it = by_label.find(cur->parent);
      if (it == by_label.end()) {
        throw std::invalid_argument("lineage: '" + label + "' has dangling parent '" + cur->parent + "'");
      }
      if (!seen.insert(it->first).second) {
        throw std::invalid_argument("lineage: cycle through '" + it->first + "'");
      }
      cur = &it->second;
    }
  }
}

}  // namespace imi
