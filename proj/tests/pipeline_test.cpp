#include "imi/pipeline.hpp"

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

using namespace imi;
namespace fs = std::filesystem;

namespace {

Trajectory constant_velocity(double vz, std::size_t n = 60) {
  std::vector<Frame> frames(n);
  for (std::size_t i = 0; i < n; ++i) {
    frames[i].base_z = 0.2 + vz * static_cast<double>(i) / 50.0;
    frames[i].v_z = vz;
    frames[i].v_x = 1.0;
  }
  TrajectoryMeta meta;
  meta.label = "cv";
  return Trajectory(50.0, frames, meta);
}

// Ballistic hop: flat, up at v0, down, flat.
Trajectory hop(double v0, double g = 9.81) {
  std::vector<Frame> frames;
  const double tf = 2.0 * v0 / g;
  for (int i = 0; i <= 150; ++i) {
    const double t = i / 50.0;
    Frame f;
    f.base_x = t;
    f.v_x = 1.0;
    const double s = t - 1.0;
    if (s > 0 && s < tf) {
      f.base_z = 0.2 + v0 * s - 0.5 * g * s * s;
      f.v_z = v0 - g * s;
    } else {
      f.base_z = 0.2;
    }
    frames.push_back(f);
  }
  TrajectoryMeta meta;
  meta.label = "hop";
  return Trajectory(50.0, frames, meta);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("imi_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  apply_profile(c, "smoke");
  c.num_envs = 4;
  c.ppo.updates = 3;
  c.ppo.horizon = 8;
  c.policy.actor_hidden = {16};
  c.policy.critic_hidden = {16};
  c.pipeline.eval_episodes = 4;
  c.pipeline.eval_envs = 4;
  return c;
}

}  // namespace

TEST(Metrics, ConstantVelocityHasZeroAcceleration) {
  const Trajectory t = constant_velocity(0.3);
  for (double a : vertical_acceleration(t)) EXPECT_NEAR(a, 0.0, 1e-12);
  const ReferenceMetrics m = reference_metrics(t, RobotModel{});
  EXPECT_FALSE(m.has_apex);  // maximum at the last frame
  EXPECT_NEAR(m.max_abs_az, 0.0, 1e-12);
}

TEST(Metrics, BallisticHop) {
  const Trajectory t = hop(2.0);
  const ReferenceMetrics m = reference_metrics(t, RobotModel{}, 0.5);
  ASSERT_TRUE(m.has_apex);
  const double t_apex = 1.0 + 2.0 / 9.81;
  EXPECT_NEAR(m.apex_time, t_apex, 0.011);
  EXPECT_NEAR(m.window_begin, m.apex_time - 0.5, 1e-12);
  EXPECT_NEAR(m.window_end, m.apex_time + 0.5, 1e-12);
  EXPECT_NEAR(m.apex_height, 4.0 / (2 * 9.81), 0.01);
  // Window contains the whole flight: max |v_z| is the take-off speed.
  EXPECT_NEAR(m.max_abs_vz, 2.0, 0.2);
  // Time above 5 cm: 2 * sqrt(2 (h - 0.05) / g)
  const double h = 4.0 / (2 * 9.81);
  EXPECT_NEAR(m.flight_duration, 2.0 * std::sqrt(2.0 * (h - 0.05) / 9.81), 0.02);
  // In-flight acceleration is -g; landing spikes exceed it.
  EXPECT_GE(m.max_abs_az, 9.81 - 1e-9);
}

TEST(Metrics, WindowIsCentredOnPeakHeight) {
  const Trajectory t = hop(1.5);
  const ReferenceMetrics m = reference_metrics(t, RobotModel{}, 0.2);
  std::size_t best = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].base_z > t[best].base_z) best = i;
  }
  EXPECT_EQ(m.apex_frame, best);
  EXPECT_NEAR(0.5 * (m.window_begin + m.window_end), t.time(best), 1e-12);
}

TEST(Compare, IdenticalTrajectoriesGiveIdenticalRows) {
  const Trajectory t = hop(2.0);
  const std::string csv = compare_references({t, t}, RobotModel{});
  std::istringstream in(csv);
  std::string header, a, b;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  EXPECT_EQ(header, compare_csv_header());
  EXPECT_EQ(a, b);
  EXPECT_THROW(compare_references({t}, RobotModel{}), std::invalid_argument);
}

TEST(Compare, FlagsTrajectoriesWithoutApex) {
  const std::string csv = compare_references({constant_velocity(0.0), hop(2.0)}, RobotModel{});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 8), "cv,60,1,");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 10), "hop,151,0,");
}

TEST(Compare, SyntheticReferenceIsInfeasible) {
  const Trajectory xi0 = synth_flip_reference(FlipParams{});
  const ReferenceMetrics m = reference_metrics(xi0, RobotModel{});
  EXPECT_TRUE(m.has_apex);
  EXPECT_LE(m.joint_limit_margin, 0.0);
  EXPECT_NEAR(m.flight_duration, 0.8, 0.2);
}

TEST(Refine, TrimsToAutoStartAndLanding) {
  Trajectory t = hop(2.0);
  std::vector<Frame> frames = t.frames();
  for (std::size_t i = 0; i < 10; ++i) frames[i].v_x = 0.0;
  t = Trajectory(50.0, frames, t.meta());
  PipelineConfig cfg;
  cfg.auto_start_vx = 0.5;
  cfg.landing_keep = 0.2;
  std::vector<RefinementOp> ops;
  const Trajectory r = refine_generated(t, t, cfg, &ops);
  ASSERT_GE(ops.size(), 1u);
  EXPECT_EQ(ops[0].op, "trim");
  EXPECT_EQ(ops[0].a, 10.0);
  const auto td = touchdown_index(t);
  ASSERT_TRUE(td);
  EXPECT_EQ(ops[0].b, static_cast<double>(*td + 10 + 1));
  // x re-aligned with the source start
  ASSERT_EQ(ops.size(), 2u);
  EXPECT_EQ(ops[1].op, "translate");
  EXPECT_DOUBLE_EQ(r[0].base_x, t[0].base_x);
  EXPECT_EQ(r.size(), *td + 1 - 10 + 10);

  cfg.trim_generated = false;
  ops.clear();
  EXPECT_EQ(refine_generated(t, t, cfg, &ops), t);
  EXPECT_TRUE(ops.empty());
}

TEST(Terrain, BoxTerrain) {
  EXPECT_EQ(box_terrain(1.0, 0.0), "flat");
  EXPECT_EQ(Terrain::parse(box_terrain(1.5, 0.3)).height_at(2.0), 0.3);
  EXPECT_EQ(Terrain::parse(box_terrain(1.5, 0.3)).height_at(1.0), 0.0);
  EXPECT_THROW(box_terrain(0.0, -0.1), std::invalid_argument);
}

TEST(Files, AtomicWriteReplaces) {
  const fs::path dir = scratch("atomic");
  fs::create_directories(dir);
  write_atomic(dir / "a.json", "one");
  write_atomic(dir / "a.json", "two");
  std::ifstream in(dir / "a.json");
  std::string s;
  in >> s;
  EXPECT_EQ(s, "two");
  EXPECT_FALSE(fs::exists(dir / "a.json.tmp"));
  fs::remove_all(dir);
}

TEST(Pipeline, TwoIterationsChainLineageAndRepeat) {
  ExperimentConfig cfg = tiny_config();
  cfg.pipeline.allow_unsuccessful = true;  // tiny policies do not flip
  const Trajectory xi0 = synth_flip_reference(cfg.synth);
  const fs::path root = scratch("chain");
  const std::vector<IterationManifest> ms = run_pipeline(cfg, xi0, RunDir(root));
  ASSERT_EQ(ms.size(), 2u);
  EXPECT_EQ(ms[0].source_reference, "xi0");
  EXPECT_EQ(ms[0].generated_reference, "xi1");
  EXPECT_EQ(ms[1].source_reference, "xi1");
  EXPECT_EQ(ms[1].generated_reference, "xi2");
  EXPECT_EQ(ms[0].enablement, 1);
  EXPECT_EQ(ms[1].enablement, 2);
  for (const char* d : {"refs", "checkpoints", "logs", "manifests", "eval"}) {
    EXPECT_FALSE(fs::is_empty(root / d)) << d;
  }

  // Manifests round-trip and the reference parent chain resolves.
  const IterationManifest back = read_manifest(root / "manifests" / "pi2.json");
  EXPECT_EQ(back.to_json(), ms[1].to_json());
  std::map<std::string, TrajectoryMeta> metas;
  for (const auto& e : fs::directory_iterator(root / "refs")) {
    const Trajectory t = load_trajectory(e.path().string());
    metas[t.meta().label] = t.meta();
  }
  EXPECT_NO_THROW(check_lineage(metas));
  EXPECT_EQ(metas.at("xi1_rollout").source, "rollout:pi1");
  EXPECT_EQ(metas.at("xi1_rollout").parent, "xi0");

  // Iteration-1 log: only joint-position terminations on at update 0.
  std::ifstream log(root / "logs" / "pi1.csv");
  std::string header, row0;
  std::getline(log, header);
  std::getline(log, row0);
  EXPECT_EQ(header, update_csv_header());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    for (std::string f; std::getline(in, f, ',');) out.push_back(f);
    return out;
  };
  const auto names = split(header), values = split(row0);
  ASSERT_EQ(names.size(), values.size());
  int on = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind("on_", 0) != 0) continue;
    const bool expect = names[i] == std::string("on_") + cause_name(TerminationCause::kJointPosition);
    EXPECT_EQ(values[i], expect ? "1" : "0") << names[i];
    ++on;
  }
  EXPECT_EQ(on, kNumConstraintCauses);

  const fs::path root2 = scratch("chain2");
  const std::vector<IterationManifest> ms2 = run_pipeline(cfg, xi0, RunDir(root2));
  ASSERT_EQ(ms2.size(), 2u);
  EXPECT_EQ(ms2[1].to_json(), ms[1].to_json());
  fs::remove_all(root);
  fs::remove_all(root2);
}

TEST(Pipeline, RefusesToPromoteTerminatedRollout) {
  ExperimentConfig cfg = tiny_config();
  const Trajectory xi0 = synth_flip_reference(cfg.synth);
  const fs::path root = scratch("refuse");
  IterationRequest req;
  req.source = xi0;
  std::optional<Trajectory> next;
  const IterationManifest m = run_iteration(cfg, req, RunDir(root), &next);
  ASSERT_TRUE(m.evaluation);
  // A three-update policy cannot complete the flip under the final limits.
  EXPECT_FALSE(m.evaluation->rollout_success);
  EXPECT_EQ(m.status, "rollout_unsuccessful");
  EXPECT_FALSE(m.promoted);
  EXPECT_FALSE(next.has_value());
  EXPECT_FALSE(m.generated_reference.has_value());
  EXPECT_TRUE(fs::exists(root / "refs" / "xi1_rollout.csv"));
  EXPECT_FALSE(fs::exists(root / "refs" / "xi1.csv"));
  fs::remove_all(root);
}

TEST(Pipeline, EvaluationAccounting) {
  ExperimentConfig cfg = tiny_config();
  const Trajectory xi0 = synth_flip_reference(cfg.synth);
  const ActorCritic zero(cfg.policy, 1);
  const Evaluation e = evaluate(zero, cfg, xi0, EvalMode::kAblation, 12, 5);
  EXPECT_EQ(e.summary.episodes, 12);
  int terminated = 0;
  for (int c : e.summary.causes) terminated += c;
  EXPECT_EQ(terminated, e.summary.episodes - e.summary.successes);
  // A near-zero policy does not flip.
  EXPECT_EQ(e.summary.success_rate, 0.0);
  const Evaluation again = evaluate(zero, cfg, xi0, EvalMode::kAblation, 12, 5);
  EXPECT_EQ(evaluation_json(again), evaluation_json(e));
  const std::string row = eval_csv_row("zero", e), header = eval_csv_header();
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(header.begin(), header.end(), ','));
}

TEST(Pipeline, ZeroBoxReducesToPlainIteration) {
  ExperimentConfig cfg = tiny_config();
  cfg.pipeline.allow_unsuccessful = true;
  const Trajectory xi0 = synth_flip_reference(cfg.synth);
  const fs::path a = scratch("box0a"), b = scratch("box0b");
  IterationRequest req;
  req.source = xi0;
  req.enablement = 2;
  const IterationManifest plain = run_iteration(cfg, req, RunDir(a));
  const IterationManifest box = adapt_task(cfg, xi0, 0.0, RunDir(b), "");
  EXPECT_EQ(plain.to_json(), box.to_json());

  const IterationManifest high = adapt_task(cfg, xi0, 0.3, RunDir(b), "high_");
  EXPECT_EQ(high.policy, "high_pi1");
  EXPECT_NE(high.terrain, "flat");
  EXPECT_DOUBLE_EQ(Terrain::parse(high.terrain).height_at(100.0), 0.3);
  fs::remove_all(a);
  fs::remove_all(b);
}
