#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "imi/config.hpp"
#include "imi/pipeline.hpp"

using namespace imi;
namespace fs = std::filesystem;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kUsage = 2;
constexpr int kDiverged = 3;
constexpr int kUnsuccessful = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> envs;
  bool quiet = false;
};

ExperimentConfig effective_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (!g.profile.empty()) apply_profile(cfg, g.profile);
  if (g.seed) cfg.seed = *g.seed;
  if (g.out_dir) cfg.out_dir = *g.out_dir;
  if (g.envs) cfg.num_envs = *g.envs;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

void check_output(const std::string& path, bool force) {
  if (fs::exists(path) && !force) {
    throw UsageError(path + " exists; pass --force to overwrite");
  }
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  write_atomic(path, text);
}

Trajectory load_ref(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("reference not found: " + path);
  return load_trajectory(path);
}

std::string stem_label(const std::string& path) { return fs::path(path).stem().string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative motion imitation workbench"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--profile", g.profile, "smoke, desk or paper")
      ->check(CLI::IsMember({"smoke", "desk", "paper"}));
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out-dir", g.out_dir, "run directory");
  app.add_option("--envs", g.envs, "parallel environments")->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", g.quiet, "no progress output");

  // config
  auto* c_config = app.add_subcommand("config", "print the effective experiment config");

  // synth
  auto* c_synth = app.add_subcommand("synth", "write the synthetic flip reference");
  std::string synth_out;
  bool synth_force = false;
  std::optional<double> flight, drive_speed, drive_duration, start_h, landing_h, tuck_u, tuck_l;
  std::optional<std::string> synth_label;
  c_synth->add_option("-o,--out", synth_out, "output CSV")->required();
  c_synth->add_option("--flight", flight, "flight duration, s")->check(CLI::PositiveNumber);
  c_synth->add_option("--drive-speed", drive_speed, "m/s")->check(CLI::PositiveNumber);
  c_synth->add_option("--drive-duration", drive_duration, "s")->check(CLI::NonNegativeNumber);
  c_synth->add_option("--start-height", start_h, "m")->check(CLI::NonNegativeNumber);
  c_synth->add_option("--landing-height", landing_h, "m")->check(CLI::NonNegativeNumber);
  c_synth->add_option("--tuck-upper", tuck_u, "peak upper-body angle, rad");
  c_synth->add_option("--tuck-lower", tuck_l, "peak lower-body angle, rad");
  c_synth->add_option("--label", synth_label);
  c_synth->add_flag("--force", synth_force, "overwrite");

  // train
  auto* c_train = app.add_subcommand("train", "train pi_n on a reference and generate xi_n");
  std::string train_ref, train_tag;
  int train_iter = 1;
  std::optional<int> train_enable;
  std::optional<double> train_box;
  c_train->add_option("--ref", train_ref, "source reference CSV")->required();
  c_train->add_option("--iteration", train_iter, "IMI iteration n")->check(CLI::PositiveNumber);
  c_train->add_option("--enablement", train_enable,
                      "constraint schedule: 1 first-iteration, 2 later (default: 1 if n = 1)")
      ->check(CLI::Range(1, 2));
  c_train->add_option("--box", train_box, "flip-up box height, m")->check(CLI::NonNegativeNumber);
  c_train->add_option("--tag", train_tag, "id prefix for artifacts");

  // rollout
  auto* c_rollout = app.add_subcommand("rollout", "deterministic nominal rollout of a checkpoint");
  std::string ro_ckpt, ro_ref, ro_out, ro_label;
  bool ro_force = false;
  std::optional<double> ro_box;
  c_rollout->add_option("--checkpoint", ro_ckpt)->required()->check(CLI::ExistingFile);
  c_rollout->add_option("--ref", ro_ref, "reference the policy tracks")->required();
  c_rollout->add_option("-o,--out", ro_out)->required();
  c_rollout->add_option("--label", ro_label);
  c_rollout->add_option("--box", ro_box, "box height, m")->check(CLI::NonNegativeNumber);
  c_rollout->add_flag("--force", ro_force);

  // trim
  auto* c_trim = app.add_subcommand("trim", "keep frames [begin, end)");
  std::string tr_in, tr_out;
  std::optional<std::size_t> tr_begin, tr_end;
  std::optional<double> tr_auto;
  bool tr_force = false;
  c_trim->add_option("-i,--in", tr_in)->required()->check(CLI::ExistingFile);
  c_trim->add_option("-o,--out", tr_out)->required();
  auto* o_begin = c_trim->add_option("--begin", tr_begin);
  c_trim->add_option("--end", tr_end);
  c_trim->add_option("--auto-start", tr_auto, "begin at the first frame with v_x >= threshold")
      ->excludes(o_begin);
  c_trim->add_flag("--force", tr_force);

  // translate
  auto* c_tl = app.add_subcommand("translate", "shift base position");
  std::string tl_in, tl_out;
  double tl_dx = 0.0, tl_dz = 0.0;
  bool tl_force = false;
  c_tl->add_option("-i,--in", tl_in)->required()->check(CLI::ExistingFile);
  c_tl->add_option("-o,--out", tl_out)->required();
  c_tl->add_option("--dx", tl_dx);
  c_tl->add_option("--dz", tl_dz);
  c_tl->add_flag("--force", tl_force);

  // eval
  auto* c_eval = app.add_subcommand("eval", "evaluate checkpoints; one CSV row each");
  std::vector<std::string> ev_ckpts;
  std::string ev_ref, ev_out = "-", ev_mode = "ablation";
  std::optional<int> ev_eps;
  std::optional<double> ev_box;
  c_eval->add_option("--checkpoint", ev_ckpts)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--ref", ev_ref)->required();
  c_eval->add_option("--episodes", ev_eps)->check(CLI::PositiveNumber);
  c_eval->add_option("--mode", ev_mode)->check(CLI::IsMember({"ablation", "nominal"}));
  c_eval->add_option("--box", ev_box, "box height, m")->check(CLI::NonNegativeNumber);
  c_eval->add_option("-o,--out", ev_out, "CSV path, - for stdout");

  // compare
  auto* c_cmp = app.add_subcommand("compare", "peak-aligned landing metrics of references");
  std::vector<std::string> cmp_in;
  std::string cmp_out = "-";
  c_cmp->add_option("trajectories", cmp_in)->required()->expected(2, -1)->check(CLI::ExistingFile);
  c_cmp->add_option("-o,--out", cmp_out, "CSV path, - for stdout");

  // imi-run
  auto* c_run = app.add_subcommand("imi-run", "chain IMI iterations, optionally the flip-up grid");
  std::string run_ref;
  bool run_flipup = false;
  c_run->add_option("--ref", run_ref, "xi_0 (default: synthesized from the config)");
  c_run->add_flag("--flip-up", run_flipup, "train every reference on the low and high box");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    const ExperimentConfig cfg = effective_config(g);
    const bool quiet = g.quiet;

    if (*c_config) {
      std::cout << config_to_json(cfg).dump(2) << '\n';
      return kOk;
    }

    if (*c_synth) {
      FlipParams p = cfg.synth;
      if (flight) p.flight_duration = *flight;
      if (drive_speed) p.drive_speed = *drive_speed;
      if (drive_duration) p.drive_duration = *drive_duration;
      if (start_h) p.start_height = *start_h;
      if (landing_h) p.landing_height = *landing_h;
      if (tuck_u) p.tuck_upper = *tuck_u;
      if (tuck_l) p.tuck_lower = *tuck_l;
      if (synth_label) p.label = *synth_label;
      check_output(synth_out, synth_force);
      Trajectory t;
      try {
        t = synth_flip_reference(p);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      save_trajectory(t, synth_out);
      const double margin = joint_limit_margin(t, cfg.env.model);
      std::printf("%s: %zu frames, %.2f s, joint-limit margin %.3f rad%s\n", synth_out.c_str(),
                  t.size(), t.duration(), margin, margin <= 0 ? " (infeasible)" : "");
      return kOk;
    }

    if (*c_train) {
      IterationRequest req;
      req.iteration = train_iter;
      req.source = load_ref(train_ref);
      req.enablement = train_enable ? *train_enable : (train_iter == 1 ? 1 : 2);
      req.box_height = train_box;
      req.tag = train_tag;
      if (train_box && *train_box > 0) req.enablement = train_enable ? *train_enable : 2;
      const RunDir dir(cfg.out_dir);
      IterationManifest m;
      try {
        m = run_iteration(cfg, req, dir, nullptr, quiet);
      } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "training diverged: %s\n", e.what());
        return kDiverged;
      }
      std::printf("%s: %s, success %.3f, mean return %.1f, manifest %s\n", m.policy.c_str(),
                  m.status.c_str(), m.evaluation->summary.success_rate,
                  m.evaluation->summary.mean_return, dir.manifest(m.policy).c_str());
      if (!m.promoted && req.generate) {
        std::fprintf(stderr, "generated rollout not promoted: %s\n", m.error.c_str());
      }
      return kOk;
    }

    if (*c_rollout) {
      check_output(ro_out, ro_force);
      std::string hash;
      const ActorCritic policy = load_checkpoint(ro_ckpt, &hash);
      const Trajectory ref = load_ref(ro_ref);
      EnvConfig env = cfg.env;
      env.randomization.enabled = false;
      if (ro_box && *ro_box > 0) env.terrain_override = box_terrain(obstacle_anchor(ref), *ro_box);
      FlipEnv fe(std::make_shared<const EnvConfig>(env), std::make_shared<const Trajectory>(ref), 0);
      TrajectoryMeta meta;
      meta.label = ro_label.empty() ? stem_label(ro_out) : ro_label;
      meta.source = "rollout:" + stem_label(ro_ckpt);
      meta.parent = ref.meta().label;
      meta.terrain = fe.terrain().describe();
      const RolloutResult r =
          record_rollout(fe, [&](const ObsVec& o) { return policy.act_deterministic(o); }, meta);
      save_trajectory(r.trajectory, ro_out);
      if (!r.stats.success) {
        std::fprintf(stderr, "rollout terminated by %s after %d steps (saved, flagged unsuccessful)\n",
                     cause_name(*r.stats.cause), r.stats.steps);
        return kUnsuccessful;
      }
      std::printf("%s: %zu frames, timed out normally\n", ro_out.c_str(), r.trajectory.size());
      return kOk;
    }

    if (*c_trim) {
      check_output(tr_out, tr_force);
      const Trajectory t = load_ref(tr_in);
      std::size_t b = tr_begin.value_or(0);
      if (tr_auto) b = auto_start_index(t, *tr_auto);
      const std::size_t e = tr_end.value_or(t.size());
      if (b >= e || e > t.size()) {
        throw UsageError("need 0 <= begin < end <= " + std::to_string(t.size()));
      }
      save_trajectory(trim(t, b, e), tr_out);
      std::printf("%s: frames [%zu, %zu)\n", tr_out.c_str(), b, e);
      return kOk;
    }

    if (*c_tl) {
      check_output(tl_out, tl_force);
      save_trajectory(translate(load_ref(tl_in), tl_dx, tl_dz), tl_out);
      return kOk;
    }

    if (*c_eval) {
      const Trajectory ref = load_ref(ev_ref);
      ExperimentConfig ecfg = cfg;
      if (ev_box && *ev_box > 0) {
        ecfg.env.terrain_override = box_terrain(obstacle_anchor(ref), *ev_box);
        ecfg.env.randomization.obstacle_probability = 0.0;
      }
      const EvalMode mode = ev_mode == "nominal" ? EvalMode::kNominal : EvalMode::kAblation;
      std::string out = eval_csv_header() + "\n";
      for (const std::string& path : ev_ckpts) {
        const ActorCritic policy = load_checkpoint(path);
        const Evaluation e = evaluate(policy, ecfg, ref, mode,
                                      ev_eps.value_or(cfg.pipeline.eval_episodes), cfg.seed);
        out += eval_csv_row(stem_label(path), e) + "\n";
      }
      write_text(ev_out, out);
      return kOk;
    }

    if (*c_cmp) {
      std::vector<Trajectory> ts;
      for (const std::string& p : cmp_in) ts.push_back(load_ref(p));
      write_text(cmp_out, compare_references(ts, cfg.env.model, cfg.pipeline.window));
      return kOk;
    }

    if (*c_run) {
      const RunDir dir(cfg.out_dir);
      write_atomic(dir.root() / "config.json", config_to_json(cfg).dump(2) + "\n");
      const Trajectory xi0 = run_ref.empty() ? synth_flip_reference(cfg.synth) : load_ref(run_ref);
      std::vector<IterationManifest> ms;
      try {
        ms = run_pipeline(cfg, xi0, dir, quiet);
      } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "training diverged: %s\n", e.what());
        return kDiverged;
      }
      std::vector<Trajectory> refs{xi0};
      for (const IterationManifest& m : ms) {
        std::printf("iteration %d: %s -> %s (%s), success %.3f\n", m.iteration,
                    m.source_reference.c_str(), m.policy.c_str(), m.status.c_str(),
                    m.evaluation ? m.evaluation->summary.success_rate : 0.0);
        if (m.generated_file) refs.push_back(load_trajectory((dir.root() / *m.generated_file).string()));
      }
      if (refs.size() >= 2) {
        write_atomic(dir.eval("compare"), compare_references(refs, cfg.env.model, cfg.pipeline.window));
      }
      if (run_flipup) {
        std::string grid = "reference,box,box_height,success_rate,mean_return,status\n";
        for (const Trajectory& ref : refs) {
          for (const auto& [name, h] : {std::pair<std::string, double>{"low", cfg.pipeline.box_low},
                                        {"high", cfg.pipeline.box_high}}) {
            const std::string tag = "flipup_" + name + "_" + ref.meta().label + "_";
            IterationManifest m;
            try {
              m = adapt_task(cfg, ref, h, dir, tag, quiet);
            } catch (const TrainingDivergence& e) {
              std::fprintf(stderr, "%s diverged: %s\n", tag.c_str(), e.what());
              grid += ref.meta().label + "," + name + "," + std::to_string(h) + ",,,diverged\n";
              continue;
            }
            char row[256];
            std::snprintf(row, sizeof row, "%s,%s,%g,%.6g,%.6g,%s\n", ref.meta().label.c_str(),
                          name.c_str(), h, m.evaluation->summary.success_rate,
                          m.evaluation->summary.mean_return, m.status.c_str());
            grid += row;
          }
        }
        write_atomic(dir.eval("flipup"), grid);
      }
      if (ms.empty() || !ms.back().promoted) return kUnsuccessful;
      return kOk;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kError;
  }
  return kOk;
}
