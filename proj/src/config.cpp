#include "imi/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace imi {

using nlohmann::json;

// Key lists shared by the reader and the writer.
template <class V>
void fields(V& v, RobotModel& m) {
  v("base_mass", m.base_mass);
  v("base_inertia", m.base_inertia);
  v("base_com", m.base_com);
  v("boing_anchor", m.boing_anchor);
  v("lower_mass", m.lower_mass);
  v("lower_inertia", m.lower_inertia);
  v("lower_length", m.lower_length);
  v("lower_com", m.lower_com);
  v("upper_mass", m.upper_mass);
  v("upper_inertia", m.upper_inertia);
  v("upper_length", m.upper_length);
  v("upper_com", m.upper_com);
  v("wheel_mass", m.wheel_mass);
  v("wheel_inertia", m.wheel_inertia);
  v("rear_radius", m.rear_radius);
  v("front_radius", m.front_radius);
  v("wheelbase", m.wheelbase);
  v("upper_limits", m.upper_limits);
  v("lower_limits", m.lower_limits);
  v("gravity", m.gravity);
  v("contact_stiffness", m.contact_stiffness);
  v("contact_damping", m.contact_damping);
  v("friction", m.friction);
  v("tangential_damping", m.tangential_damping);
  v("limit_stiffness", m.limit_stiffness);
  v("limit_damping", m.limit_damping);
  v("limit_slack", m.limit_slack);
}

template <class V>
void fields(V& v, ActuatorConfig& a) {
  v("kp", a.kp);
  v("kd", a.kd);
  v("action_scale", a.action_scale);
  v("torque_limit", a.torque_limit);
  v("rear_velocity_limit", a.rear_velocity_limit);
  v("delay_steps", a.delay_steps);
  v("default_q", a.default_q);
}

template <class V>
void fields(V& v, RewardConfig& r) {
  v("w_base_position", r.w_base_position);
  v("tol_base_position", r.tol_base_position);
  v("alpha_base", r.alpha_base);
  v("w_base_orientation", r.w_base_orientation);
  v("tol_base_orientation", r.tol_base_orientation);
  v("alpha_angle", r.alpha_angle);
  v("w_joint_position", r.w_joint_position);
  v("tol_joint_position", r.tol_joint_position);
  v("alpha_joint", r.alpha_joint);
  v("w_smoothness_initial", r.w_smoothness_initial);
  v("w_smoothness_final", r.w_smoothness_final);
  v("w_contact_force", r.w_contact_force);
  v("tol_contact_force", r.tol_contact_force);
  v("w_joint_limit", r.w_joint_limit);
  v("joint_limit_soft_fraction", r.joint_limit_soft_fraction);
  v("w_default_pose", r.w_default_pose);
  v("alpha_default_pose", r.alpha_default_pose);
  v("w_jitter", r.w_jitter);
  v("w_velocity", r.w_velocity);
  v("tol_velocity", r.tol_velocity);
}

template <class V>
void fields(V& v, ConstraintConfig& c) {
  v("upper", c.upper);
  v("lower", c.lower);
  v("touchdown_speed", c.touchdown_speed);
  v("power", c.power);
  v("torque", c.torque);
  v("wheel_velocity", c.wheel_velocity);
  v("deviation_position", c.deviation_position);
  v("deviation_orientation", c.deviation_orientation);
  v("curriculum_start", c.curriculum_start);
  v("curriculum_end", c.curriculum_end);
  v("first_iteration_intro", c.first_iteration_intro);
}

template <class V>
void fields(V& v, RandomizationConfig& r) {
  v("enabled", r.enabled);
  v("mass_scale", r.mass_scale);
  v("friction_scale", r.friction_scale);
  v("motor_strength", r.motor_strength);
  v("kp_scale", r.kp_scale);
  v("kd_scale", r.kd_scale);
  v("delay_min", r.delay_min);
  v("delay_max", r.delay_max);
  v("noise_joint_pos", r.noise_joint_pos);
  v("noise_joint_vel", r.noise_joint_vel);
  v("noise_ang_vel", r.noise_ang_vel);
  v("noise_gravity", r.noise_gravity);
  v("push_velocity", r.push_velocity);
  v("push_interval", r.push_interval);
  v("obstacle_probability", r.obstacle_probability);
  v("obstacle_height", r.obstacle_height);
  v("obstacle_offset", r.obstacle_offset);
}

template <class V>
void fields(V& v, EnvConfig& e) {
  v("model", e.model);
  v("actuator", e.actuator);
  v("reward", e.reward);
  v("constraints", e.constraints);
  v("randomization", e.randomization);
  v("policy_rate", e.policy_rate);
  v("substeps", e.substeps);
  v("post_time", e.post_time);
  v("rsi_probability", e.rsi_probability);
  v("rsi_span", e.rsi_span);
  v("rsi_retries", e.rsi_retries);
  v("action_clip", e.action_clip);
  v("terrain_override", e.terrain_override);
}

template <class V>
void fields(V& v, PpoConfig& p) {
  v("gamma", p.gamma);
  v("lambda", p.lambda);
  v("clip", p.clip);
  v("learning_rate", p.learning_rate);
  v("lr_final_fraction", p.lr_final_fraction);
  v("epochs", p.epochs);
  v("minibatches", p.minibatches);
  v("horizon", p.horizon);
  v("entropy_coef", p.entropy_coef);
  v("value_coef", p.value_coef);
  v("max_grad_norm", p.max_grad_norm);
  v("updates", p.updates);
}

template <class V>
void fields(V& v, PolicyConfig& p) {
  v("actor_hidden", p.actor_hidden);
  v("critic_hidden", p.critic_hidden);
  v("init_log_std", p.init_log_std);
  v("log_std_min", p.log_std_min);
  v("log_std_max", p.log_std_max);
}

template <class V>
void fields(V& v, PipelineConfig& p) {
  v("iterations", p.iterations);
  v("eval_episodes", p.eval_episodes);
  v("eval_envs", p.eval_envs);
  v("trim_generated", p.trim_generated);
  v("auto_start_vx", p.auto_start_vx);
  v("landing_keep", p.landing_keep);
  v("allow_unsuccessful", p.allow_unsuccessful);
  v("box_low", p.box_low);
  v("box_high", p.box_high);
  v("window", p.window);
}

template <class V>
void fields(V& v, FlipParams& f) {
  v("drive_speed", f.drive_speed);
  v("drive_duration", f.drive_duration);
  v("flight_duration", f.flight_duration);
  v("start_height", f.start_height);
  v("landing_height", f.landing_height);
  v("landing_duration", f.landing_duration);
  v("tuck_upper", f.tuck_upper);
  v("tuck_lower", f.tuck_lower);
  v("wheel_radius", f.wheel_radius);
  v("gravity", f.gravity);
  v("rate_hz", f.rate_hz);
  v("label", f.label);
}

template <class V>
void fields(V& v, ExperimentConfig& c) {
  v("env", c.env);
  v("ppo", c.ppo);
  v("policy", c.policy);
  v("pipeline", c.pipeline);
  v("synth", c.synth);
  v("seed", c.seed);
  v("num_envs", c.num_envs);
  v("out_dir", c.out_dir);
}

namespace {

struct Writer {
  json& j;

  template <class T>
  void operator()(const char* key, const T& v) {
    j[key] = write(v);
  }

  template <class T>
  static json write(const T& v) {
    if constexpr (std::is_same_v<T, Vec2> || std::is_same_v<T, Vec3>) {
      return json(std::vector<double>(v.data(), v.data() + v.size()));
    } else if constexpr (std::is_same_v<T, JointLimits>) {
      return json::array({v.lo, v.hi});
    } else if constexpr (std::is_same_v<T, Range>) {
      return json::array({v.lo, v.hi});
    } else if constexpr (std::is_same_v<T, std::optional<std::string>>) {
      return v ? json(*v) : json(nullptr);
    } else if constexpr (std::is_class_v<T> && !std::is_same_v<T, std::string> &&
                         !std::is_same_v<T, std::vector<int>> &&
                         !std::is_same_v<T, std::array<double, 2>>) {
      json out = json::object();
      Writer w{out};
      fields(w, const_cast<T&>(v));
      return out;
    } else {
      return json(v);
    }
  }
};

struct Reader {
  const json& j;
  std::string path;
  std::set<std::string> seen;

  template <class T>
  void operator()(const char* key, T& v) {
    seen.insert(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    read(*it, v, path + "." + key);
  }

  void finish() const {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!seen.count(it.key())) throw ConfigError("unknown config key " + path + "." + it.key());
    }
  }

  template <class T>
  static void read(const json& src, T& v, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, Vec2> || std::is_same_v<T, Vec3>) {
        const auto a = src.get<std::vector<double>>();
        if (static_cast<Eigen::Index>(a.size()) != v.size()) throw ConfigError(where + ": wrong length");
        for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i];
      } else if constexpr (std::is_same_v<T, JointLimits> || std::is_same_v<T, Range>) {
        const auto a = src.get<std::vector<double>>();
        if (a.size() != 2) throw ConfigError(where + ": expected [lo, hi]");
        v.lo = a[0];
        v.hi = a[1];
      } else if constexpr (std::is_same_v<T, std::optional<std::string>>) {
        if (src.is_null()) {
          v.reset();
        } else {
          v = src.get<std::string>();
        }
      } else if constexpr (std::is_class_v<T> && !std::is_same_v<T, std::string> &&
                           !std::is_same_v<T, std::vector<int>> &&
                           !std::is_same_v<T, std::array<double, 2>>) {
        if (!src.is_object()) throw ConfigError(where + ": expected an object");
        Reader r{src, where, {}};
        fields(r, v);
        r.finish();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!src.is_boolean()) throw ConfigError(where + ": expected true/false");
        v = src.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!src.is_number_integer()) throw ConfigError(where + ": expected an integer");
        if (std::is_unsigned_v<T> && src.get<long long>() < 0) {
          throw ConfigError(where + ": must be >= 0");
        }
        v = src.get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!src.is_number()) throw ConfigError(where + ": expected a number");
        v = src.get<T>();
      } else {
        v = src.get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }

};

}  // namespace

void PipelineConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("pipeline.iterations must be >= 1");
  if (eval_episodes < 1 || eval_envs < 1) {
    throw std::invalid_argument("pipeline.eval_episodes and eval_envs must be >= 1");
  }
  if (!(landing_keep >= 0) || !(window > 0)) {
    throw std::invalid_argument("pipeline.landing_keep must be >= 0 and window > 0");
  }
  if (!(box_low >= 0) || !(box_high >= 0)) throw std::invalid_argument("pipeline box heights must be >= 0");
}

void ExperimentConfig::validate() const {
  env.validate();
  ppo.validate();
  policy.validate();
  pipeline.validate();
  if (num_envs < 1) throw std::invalid_argument("num_envs must be >= 1");
  if (!(synth.flight_duration > 0) || !(synth.drive_duration >= 0) || !(synth.rate_hz > 0)) {
    throw std::invalid_argument("synth: flight_duration and rate_hz must be > 0");
  }
}

json config_to_json(const ExperimentConfig& cfg) {
  return Writer::write(cfg);
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  Reader::read(j, cfg, "$");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_profile(ExperimentConfig& cfg, const std::string& profile) {
  if (profile == "smoke") {
    cfg.num_envs = 8;
    cfg.ppo.updates = 20;
    cfg.pipeline.eval_episodes = 8;
    cfg.pipeline.eval_envs = 8;
  } else if (profile == "desk") {
    cfg.num_envs = 256;
    cfg.ppo.updates = 2000;
  } else if (profile == "paper") {
    cfg.num_envs = 4096;
    cfg.ppo.updates = 15000;
    cfg.policy.actor_hidden = {512, 256, 128};
    cfg.policy.critic_hidden = {512, 512, 256};
  } else {
    throw ConfigError("unknown profile '" + profile + "' (smoke, desk, paper)");
  }
}

}  // namespace imi
