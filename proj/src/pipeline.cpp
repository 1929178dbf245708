#include "imi/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

namespace imi {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kApexClearance = 0.05;

std::uint64_t derive_seed(std::uint64_t master, const std::string& tag, int n, std::uint64_t purpose) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return instance_seed(master ^ h, static_cast<std::uint64_t>(n) * 16 + purpose);
}

// Linear crossing time of level between frames i and i + 1.
double crossing(const Trajectory& t, std::size_t i, double level) {
  const double z0 = t[i].base_z, z1 = t[i + 1].base_z;
  const double f = z1 == z0 ? 0.0 : std::clamp((level - z0) / (z1 - z0), 0.0, 1.0);
  return t.time(i) + f * t.dt();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

std::vector<double> vertical_acceleration(const Trajectory& traj) {
  const std::size_t n = traj.size();
  std::vector<double> a(n, 0.0);
  if (n < 2) return a;
  const double dt = traj.dt();
  a[0] = (traj[1].v_z - traj[0].v_z) / dt;
  a[n - 1] = (traj[n - 1].v_z - traj[n - 2].v_z) / dt;
  for (std::size_t i = 1; i + 1 < n; ++i) a[i] = (traj[i + 1].v_z - traj[i - 1].v_z) / (2.0 * dt);
  return a;
}

ReferenceMetrics reference_metrics(const Trajectory& traj, const RobotModel& model,
                                   double half_window) {
  if (traj.size() < 2) throw std::invalid_argument("reference_metrics: need at least two frames");
  ReferenceMetrics m;
  m.label = traj.meta().label;
  m.frames = traj.size();
  std::size_t apex = 0;
  for (std::size_t i = 1; i < traj.size(); ++i) {
    if (traj[i].base_z > traj[apex].base_z) apex = i;
  }
  m.apex_frame = apex;
  m.apex_time = traj.time(apex);
  m.apex_height = traj[apex].base_z - traj[0].base_z;
  m.has_apex = apex > 0 && apex + 1 < traj.size() && m.apex_height >= kApexClearance;
  m.joint_limit_margin = joint_limit_margin(traj, model);

  m.window_begin = std::max(0.0, m.apex_time - half_window);
  m.window_end = std::min(traj.duration(), m.apex_time + half_window);
  const std::vector<double> az = vertical_acceleration(traj);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    if (std::abs(traj.time(i) - m.apex_time) > half_window + 1e-9) continue;
    m.max_abs_vz = std::max(m.max_abs_vz, std::abs(traj[i].v_z));
    m.max_abs_az = std::max(m.max_abs_az, std::abs(az[i]));
  }

  if (m.has_apex) {
    const double rise = traj[0].base_z + kApexClearance;
    const double fall = traj[traj.size() - 1].base_z + kApexClearance;
    double t_up = 0.0, t_down = traj.duration();
    for (std::size_t i = apex; i-- > 0;) {
      if (traj[i].base_z <= rise) {
        t_up = crossing(traj, i, rise);
        break;
      }
    }
    for (std::size_t i = apex + 1; i < traj.size(); ++i) {
      if (traj[i].base_z <= fall) {
        t_down = crossing(traj, i - 1, fall);
        break;
      }
    }
    m.flight_duration = std::max(0.0, t_down - t_up);
  }
  return m;
}

std::string compare_csv_header() {
  return "label,frames,flagged,apex_frame,apex_time,apex_height,window_begin,window_end,max_abs_vz,"
         "max_abs_az,joint_limit_margin,flight_duration";
}

std::string compare_csv_row(const ReferenceMetrics& m) {
  std::ostringstream os;
  os << m.label << ',' << m.frames << ',' << int(!m.has_apex) << ',' << m.apex_frame << ','
     << fmt(m.apex_time) << ',' << fmt(m.apex_height) << ',' << fmt(m.window_begin) << ','
     << fmt(m.window_end) << ',' << fmt(m.max_abs_vz) << ',' << fmt(m.max_abs_az) << ','
     << fmt(m.joint_limit_margin) << ',' << fmt(m.flight_duration);
  return os.str();
}

std::string compare_references(const std::vector<Trajectory>& trajs, const RobotModel& model,
                               double half_window) {
  if (trajs.size() < 2) throw std::invalid_argument("compare needs at least two trajectories");
  std::string out = compare_csv_header() + "\n";
  for (const Trajectory& t : trajs) out += compare_csv_row(reference_metrics(t, model, half_window)) + "\n";
  return out;
}

namespace {

std::shared_ptr<EnvConfig> nominal_env(const EnvConfig& base) {
  auto e = std::make_shared<EnvConfig>(base);
  e->randomization.enabled = false;
  return e;
}

RolloutResult nominal_rollout(const ActorCritic& policy, const EnvConfig& env_cfg,
                              std::shared_ptr<const Trajectory> ref, TrajectoryMeta meta) {
  FlipEnv env(nominal_env(env_cfg), std::move(ref), 0);
  meta.terrain = env.terrain().describe();
  return record_rollout(env, [&](const ObsVec& o) { return policy.act_deterministic(o); },
                        std::move(meta));
}

}  // namespace

Evaluation evaluate(const ActorCritic& policy, const ExperimentConfig& cfg, const Trajectory& ref,
                    EvalMode mode, int episodes, std::uint64_t seed) {
  Evaluation e;
  e.mode = mode;
  auto shared_ref = std::make_shared<const Trajectory>(ref);
  std::shared_ptr<const EnvConfig> env_cfg =
      mode == EvalMode::kNominal ? nominal_env(cfg.env) : std::make_shared<EnvConfig>(cfg.env);
  e.summary = evaluate_policy(policy, env_cfg, shared_ref, episodes, mode == EvalMode::kAblation,
                              seed, cfg.pipeline.eval_envs);
  TrajectoryMeta meta;
  meta.label = "eval_rollout";
  meta.source = "rollout:eval";
  const RolloutResult r = nominal_rollout(policy, cfg.env, shared_ref, meta);
  e.rollout = reference_metrics(r.trajectory, cfg.env.model, cfg.pipeline.window);
  e.rollout_success = r.stats.success;
  e.rollout_cause = r.stats.cause;
  e.rollout_steps = r.stats.steps;
  e.rollout_touchdown_speed = r.stats.peak_touchdown_speed;
  return e;
}

namespace {

json metrics_json(const ReferenceMetrics& m) {
  return {{"label", m.label},
          {"frames", m.frames},
          {"has_apex", m.has_apex},
          {"apex_frame", m.apex_frame},
          {"apex_time", m.apex_time},
          {"apex_height", m.apex_height},
          {"window_begin", m.window_begin},
          {"window_end", m.window_end},
          {"max_abs_vz", m.max_abs_vz},
          {"max_abs_az", m.max_abs_az},
          {"joint_limit_margin", m.joint_limit_margin},
          {"flight_duration", m.flight_duration}};
}

ReferenceMetrics metrics_from_json(const json& j) {
  ReferenceMetrics m;
  m.label = j.at("label").get<std::string>();
  m.frames = j.at("frames").get<std::size_t>();
  m.has_apex = j.at("has_apex").get<bool>();
  m.apex_frame = j.at("apex_frame").get<std::size_t>();
  m.apex_time = j.at("apex_time").get<double>();
  m.apex_height = j.at("apex_height").get<double>();
  m.window_begin = j.at("window_begin").get<double>();
  m.window_end = j.at("window_end").get<double>();
  m.max_abs_vz = j.at("max_abs_vz").get<double>();
  m.max_abs_az = j.at("max_abs_az").get<double>();
  m.joint_limit_margin = j.at("joint_limit_margin").get<double>();
  m.flight_duration = j.at("flight_duration").get<double>();
  return m;
}

std::optional<TerminationCause> cause_from_name(const std::string& s) {
  for (int c = 0; c < kNumCauses; ++c) {
    if (s == cause_name(static_cast<TerminationCause>(c))) return static_cast<TerminationCause>(c);
  }
  return std::nullopt;
}

Evaluation evaluation_from_json(const json& j) {
  Evaluation e;
  e.mode = j.at("mode").get<std::string>() == "nominal" ? EvalMode::kNominal : EvalMode::kAblation;
  EvalSummary& s = e.summary;
  s.episodes = j.at("episodes").get<int>();
  s.successes = j.at("successes").get<int>();
  s.success_rate = j.at("success_rate").get<double>();
  s.mean_return = j.at("mean_return").get<double>();
  s.std_return = j.at("std_return").get<double>();
  for (int c = 0; c < kNumCauses; ++c) {
    s.causes[c] = j.at("causes").at(cause_name(static_cast<TerminationCause>(c))).get<int>();
  }
  s.peak_touchdown_speed = j.at("peak_touchdown_speed").get<double>();
  s.peak_torque = j.at("peak_torque").get<double>();
  s.peak_power = j.at("peak_power").get<double>();
  e.rollout = metrics_from_json(j.at("rollout"));
  e.rollout_success = j.at("rollout_success").get<bool>();
  if (!j.at("rollout_cause").is_null()) e.rollout_cause = cause_from_name(j.at("rollout_cause"));
  e.rollout_steps = j.at("rollout_steps").get<int>();
  e.rollout_touchdown_speed = j.at("rollout_touchdown_speed").get<double>();
  return e;
}

}  // namespace

json evaluation_json(const Evaluation& e) {
  const EvalSummary& s = e.summary;
  json causes = json::object();
  for (int c = 0; c < kNumCauses; ++c) causes[cause_name(static_cast<TerminationCause>(c))] = s.causes[c];
  return {{"mode", e.mode == EvalMode::kNominal ? "nominal" : "ablation"},
          {"episodes", s.episodes},
          {"successes", s.successes},
          {"success_rate", s.success_rate},
          {"mean_return", s.mean_return},
          {"std_return", s.std_return},
          {"causes", causes},
          {"peak_touchdown_speed", s.peak_touchdown_speed},
          {"peak_torque", s.peak_torque},
          {"peak_power", s.peak_power},
          {"rollout", metrics_json(e.rollout)},
          {"rollout_success", e.rollout_success},
          {"rollout_cause", e.rollout_cause ? json(cause_name(*e.rollout_cause)) : json(nullptr)},
          {"rollout_steps", e.rollout_steps},
          {"rollout_touchdown_speed", e.rollout_touchdown_speed}};
}

std::string eval_csv_header() {
  std::string h = "name,mode,episodes,successes,success_rate,mean_return,std_return";
  for (int c = 0; c < kNumCauses; ++c) h += std::string(",n_") + cause_name(static_cast<TerminationCause>(c));
  h += ",peak_touchdown_speed,peak_torque,peak_power,rollout_success,rollout_cause,rollout_steps,"
       "rollout_touchdown_speed,apex_time,"
       "window_begin,window_end,max_abs_vz,max_abs_az,joint_limit_margin,flight_duration";
  return h;
}

std::string eval_csv_row(const std::string& name, const Evaluation& e) {
  const EvalSummary& s = e.summary;
  std::ostringstream os;
  os << name << ',' << (e.mode == EvalMode::kNominal ? "nominal" : "ablation") << ',' << s.episodes
     << ',' << s.successes << ',' << fmt(s.success_rate) << ',' << fmt(s.mean_return) << ','
     << fmt(s.std_return);
  for (int c : s.causes) os << ',' << c;
  const ReferenceMetrics& m = e.rollout;
  os << ',' << fmt(s.peak_touchdown_speed) << ',' << fmt(s.peak_torque) << ',' << fmt(s.peak_power)
     << ',' << int(e.rollout_success) << ','
     << (e.rollout_cause ? cause_name(*e.rollout_cause) : "timeout") << ',' << e.rollout_steps
     << ',' << fmt(e.rollout_touchdown_speed) << ',' << fmt(m.apex_time)
     << ',' << fmt(m.window_begin) << ',' << fmt(m.window_end) << ',' << fmt(m.max_abs_vz) << ','
     << fmt(m.max_abs_az) << ',' << fmt(m.joint_limit_margin) << ',' << fmt(m.flight_duration);
  return os.str();
}

Trajectory refine_generated(const Trajectory& rollout, const Trajectory& source,
                            const PipelineConfig& cfg, std::vector<RefinementOp>* ops) {
  if (!cfg.trim_generated) return rollout;
  std::size_t begin = 0;
  if (cfg.auto_start_vx > 0.0) {
    try {
      begin = auto_start_index(rollout, cfg.auto_start_vx);
    } catch (const std::exception&) {
      begin = 0;
    }
  }
  std::size_t end = std::min(rollout.size(), source.size());
  if (const auto td = touchdown_index(rollout)) {
    const auto keep = static_cast<std::size_t>(std::llround(cfg.landing_keep * rollout.rate_hz()));
    end = std::min(rollout.size(), *td + keep + 1);
  }
  if (end <= begin + 1) end = std::min(rollout.size(), begin + 2);
  Trajectory out = rollout;
  if (begin != 0 || end != rollout.size()) {
    out = trim(rollout, begin, end);
    if (ops) ops->push_back({"trim", static_cast<double>(begin), static_cast<double>(end)});
  }
  // Re-align x with the source start; only meaningful on flat ground.
  const double dx = source[0].base_x - out[0].base_x;
  if (Terrain::parse(out.meta().terrain).is_flat() && std::abs(dx) > 1e-12) {
    out = translate(out, dx, 0.0);
    if (ops) ops->push_back({"translate", dx, 0.0});
  }
  return out;
}

RunDir::RunDir(fs::path root) : root_(std::move(root)) {
  for (const char* d : {"refs", "checkpoints", "logs", "manifests", "eval"}) {
    fs::create_directories(root_ / d);
  }
}

fs::path RunDir::ref(const std::string& label) const { return root_ / "refs" / (label + ".csv"); }
fs::path RunDir::checkpoint(const std::string& id) const {
  return root_ / "checkpoints" / (id + ".json");
}
fs::path RunDir::log(const std::string& id) const { return root_ / "logs" / (id + ".csv"); }
fs::path RunDir::manifest(const std::string& id) const {
  return root_ / "manifests" / (id + ".json");
}
fs::path RunDir::eval(const std::string& id) const { return root_ / "eval" / (id + ".csv"); }

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json IterationManifest::to_json() const {
  json ops = json::array();
  for (const RefinementOp& op : refinements) {
    if (op.op == "trim") {
      ops.push_back({{"op", "trim"}, {"begin", op.a}, {"end", op.b}});
    } else {
      ops.push_back({{"op", op.op}, {"dx", op.a}, {"dz", op.b}});
    }
  }
  auto opt = [](const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); };
  return {{"iteration", iteration},
          {"status", status},
          {"error", error},
          {"source_reference", source_reference},
          {"source_file", source_file},
          {"policy", policy},
          {"checkpoint_file", checkpoint_file},
          {"log_file", log_file},
          {"generated_reference", opt(generated_reference)},
          {"generated_file", opt(generated_file)},
          {"promoted", promoted},
          {"enablement", enablement},
          {"terrain", terrain},
          {"seed", seed},
          {"config_hash", config_hash},
          {"updates_done", updates_done},
          {"evaluation", evaluation ? evaluation_json(*evaluation) : json(nullptr)},
          {"refinements", ops}};
}

IterationManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  IterationManifest m;
  auto opt = [&](const char* k) -> std::optional<std::string> {
    return j.at(k).is_null() ? std::nullopt : std::optional<std::string>(j.at(k).get<std::string>());
  };
  m.iteration = j.at("iteration").get<int>();
  m.status = j.at("status").get<std::string>();
  m.error = j.at("error").get<std::string>();
  m.source_reference = j.at("source_reference").get<std::string>();
  m.source_file = j.at("source_file").get<std::string>();
  m.policy = j.at("policy").get<std::string>();
  m.checkpoint_file = j.at("checkpoint_file").get<std::string>();
  m.log_file = j.at("log_file").get<std::string>();
  m.generated_reference = opt("generated_reference");
  m.generated_file = opt("generated_file");
  m.promoted = j.at("promoted").get<bool>();
  m.enablement = j.at("enablement").get<int>();
  m.terrain = j.at("terrain").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.updates_done = j.at("updates_done").get<int>();
  if (!j.at("evaluation").is_null()) m.evaluation = evaluation_from_json(j.at("evaluation"));
  for (const json& op : j.at("refinements")) {
    const std::string name = op.at("op").get<std::string>();
    if (name == "trim") {
      m.refinements.push_back({name, op.at("begin").get<double>(), op.at("end").get<double>()});
    } else {
      m.refinements.push_back({name, op.at("dx").get<double>(), op.at("dz").get<double>()});
    }
  }
  return m;
}

std::string box_terrain(double x, double h) {
  if (h < 0) throw std::invalid_argument("box height must be >= 0");
  return h > 0 ? Terrain::step_up(x, h).describe() : Terrain::flat().describe();
}

IterationManifest run_iteration(const ExperimentConfig& cfg, const IterationRequest& req,
                                const RunDir& dir, std::optional<Trajectory>* next, bool quiet) {
  if (req.iteration < 1) throw std::invalid_argument("iteration index must be >= 1");
  if (req.source.size() < 2) throw std::invalid_argument("source reference has fewer than two frames");
  cfg.validate();

  ExperimentConfig run_cfg = cfg;
  if (req.box_height && *req.box_height > 0) {
    run_cfg.env.terrain_override = box_terrain(obstacle_anchor(req.source), *req.box_height);
    run_cfg.env.randomization.obstacle_probability = 0.0;
  }

  IterationManifest m;
  m.iteration = req.iteration;
  m.enablement = req.enablement;
  m.source_reference = req.source.meta().label;
  m.policy = req.tag + "pi" + std::to_string(req.iteration);
  m.seed = cfg.seed;
  m.config_hash = config_hash(run_cfg);
  m.terrain = run_cfg.env.terrain_override ? *run_cfg.env.terrain_override : req.source.meta().terrain;

  const fs::path src_path = dir.ref(m.source_reference);
  if (!fs::exists(src_path)) save_trajectory(req.source, src_path.string());
  m.source_file = fs::relative(src_path, dir.root()).string();
  m.log_file = fs::relative(dir.log(m.policy), dir.root()).string();
  m.checkpoint_file = fs::relative(dir.checkpoint(m.policy), dir.root()).string();

  auto env_cfg = std::make_shared<const EnvConfig>(run_cfg.env);
  auto ref = std::make_shared<const Trajectory>(req.source);
  TrainConfig tc;
  tc.num_envs = cfg.num_envs;
  tc.imi_iteration = req.enablement;
  tc.seed = derive_seed(cfg.seed, req.tag, req.iteration, 1);
  tc.ppo = cfg.ppo;
  tc.policy = cfg.policy;
  Trainer trainer(env_cfg, ref, tc);

  {
    std::ofstream log(dir.log(m.policy), std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + dir.log(m.policy).string());
    log << update_csv_header() << '\n';
    try {
      trainer.run([&](const UpdateLog& u, const std::vector<EpisodeStats>&) {
        log << update_csv_row(u) << '\n';
        m.updates_done = u.update + 1;
        if (!quiet && (u.update % 50 == 0 || u.update + 1 == cfg.ppo.updates)) {
          std::fprintf(stderr, "[%s] update %d/%d return %.1f success %.2f\n", m.policy.c_str(),
                       u.update + 1, cfg.ppo.updates, u.mean_return, u.success_rate);
        }
      });
    } catch (const TrainingDivergence& e) {
      log.flush();
      m.status = "diverged";
      m.error = e.what();
      write_atomic(dir.manifest(m.policy), m.to_json().dump(2) + "\n");
      throw;
    }
  }
  save_checkpoint(trainer.policy(), dir.checkpoint(m.policy).string(), m.config_hash);

  Evaluation ev = evaluate(trainer.policy(), run_cfg, req.source, EvalMode::kAblation,
                           cfg.pipeline.eval_episodes, derive_seed(cfg.seed, req.tag, req.iteration, 2));
  write_atomic(dir.eval(m.policy), eval_csv_header() + "\n" + eval_csv_row(m.policy, ev) + "\n");
  m.evaluation = ev;

  m.status = "complete";
  if (req.generate) {
    const std::string label = req.tag + "xi" + std::to_string(req.iteration);
    TrajectoryMeta meta;
    meta.label = label + "_rollout";
    meta.source = "rollout:" + m.policy;
    meta.parent = m.source_reference;
    const RolloutResult r = nominal_rollout(trainer.policy(), run_cfg.env, ref, meta);
    save_trajectory(r.trajectory, dir.ref(meta.label).string());
    if (!r.stats.success) {
      m.status = "rollout_unsuccessful";
      m.error = std::string("generated rollout ended by ") + cause_name(*r.stats.cause) +
                " after " + std::to_string(r.stats.steps) + " steps";
    }
    if (r.stats.success || cfg.pipeline.allow_unsuccessful) {
      Trajectory t = refine_generated(r.trajectory, req.source, cfg.pipeline, &m.refinements);
      // Keep every intermediate on disk so the parent chain resolves.
      if (m.refinements.size() == 2) {
        Trajectory mid = trim(r.trajectory, static_cast<std::size_t>(m.refinements[0].a),
                              static_cast<std::size_t>(m.refinements[0].b));
        save_trajectory(mid, dir.ref(mid.meta().label).string());
      }
      t.meta().label = label;
      save_trajectory(t, dir.ref(label).string());
      m.generated_reference = label;
      m.generated_file = fs::relative(dir.ref(label), dir.root()).string();
      m.promoted = true;
      if (next) *next = std::move(t);
    }
  }
  write_atomic(dir.manifest(m.policy), m.to_json().dump(2) + "\n");
  return m;
}

IterationManifest adapt_task(const ExperimentConfig& cfg, const Trajectory& reference,
                             double box_height, const RunDir& dir, const std::string& tag, bool quiet) {
  if (!(box_height >= 0)) throw std::invalid_argument("box height must be >= 0");
  IterationRequest req;
  req.iteration = 1;
  req.source = reference;
  req.tag = tag;
  req.enablement = 2;
  req.box_height = box_height;
  req.generate = true;
  return run_iteration(cfg, req, dir, nullptr, quiet);
}

std::vector<IterationManifest> run_pipeline(const ExperimentConfig& cfg, const Trajectory& xi0,
                                            const RunDir& dir, bool quiet) {
  std::vector<IterationManifest> out;
  Trajectory source = xi0;
  for (int n = 1; n <= cfg.pipeline.iterations; ++n) {
    IterationRequest req;
    req.iteration = n;
    req.source = source;
    req.enablement = n == 1 ? 1 : 2;
    std::optional<Trajectory> next;
    out.push_back(run_iteration(cfg, req, dir, &next, quiet));
    if (!next) break;
    source = std::move(*next);
  }
  return out;
}

}  // namespace imi
