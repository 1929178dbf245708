#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "imi/config.hpp"
#include "imi/learner.hpp"
#include "imi/trajectory.hpp"

namespace imi {

// Peak-aligned landing metrics of one trajectory. The window is centred on
// the frame of maximum base height.
struct ReferenceMetrics {
  std::string label;
  std::size_t frames = 0;
  bool has_apex = false;          // base rises >= 5 cm above its start
  std::size_t apex_frame = 0;
  double apex_time = 0.0;
  double apex_height = 0.0;       // above the first frame
  double window_begin = 0.0;      // s
  double window_end = 0.0;
  double max_abs_vz = 0.0;        // in the window
  double max_abs_az = 0.0;        // central difference of v_z, in the window
  double joint_limit_margin = 0.0;
  double flight_duration = 0.0;   // s spent 5 cm above the take-off / landing height
};

ReferenceMetrics reference_metrics(const Trajectory& traj, const RobotModel& model,
                                   double half_window = 0.5);

// Per-frame vertical acceleration by central differences of v_z (one-sided at
// the ends).
std::vector<double> vertical_acceleration(const Trajectory& traj);

std::string compare_csv_header();
std::string compare_csv_row(const ReferenceMetrics& m);
// Throws std::invalid_argument for fewer than two trajectories.
std::string compare_references(const std::vector<Trajectory>& trajs, const RobotModel& model,
                               double half_window = 0.5);

enum class EvalMode {
  kAblation,  // stochastic policy, full randomization
  kNominal,   // deterministic policy, randomization off
};

struct Evaluation {
  EvalMode mode = EvalMode::kAblation;
  EvalSummary summary;
  // Landing metrics of the deterministic nominal rollout.
  ReferenceMetrics rollout;
  bool rollout_success = false;
  std::optional<TerminationCause> rollout_cause;
  int rollout_steps = 0;
  double rollout_touchdown_speed = 0.0;  // peak onset speed in that rollout
};

Evaluation evaluate(const ActorCritic& policy, const ExperimentConfig& cfg, const Trajectory& ref,
                    EvalMode mode, int episodes, std::uint64_t seed);

nlohmann::json evaluation_json(const Evaluation& e);
std::string eval_csv_header();
std::string eval_csv_row(const std::string& name, const Evaluation& e);

struct RefinementOp {
  std::string op;    // "trim" or "translate"
  double a = 0.0;    // trim begin / dx
  double b = 0.0;    // trim end / dz
};

// Trim to [auto start, touchdown + landing_keep] and shift x so the kept
// part starts at the original reference's start x.
Trajectory refine_generated(const Trajectory& rollout, const Trajectory& source,
                            const PipelineConfig& cfg, std::vector<RefinementOp>* ops);

// Run directory with refs/, checkpoints/, logs/, manifests/ and eval/.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path ref(const std::string& label) const;
  std::filesystem::path checkpoint(const std::string& id) const;
  std::filesystem::path log(const std::string& id) const;
  std::filesystem::path manifest(const std::string& id) const;
  std::filesystem::path eval(const std::string& id) const;

 private:
  std::filesystem::path root_;
};

// Writes to a temporary file and renames it over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& text);

struct IterationRequest {
  int iteration = 1;              // n: trains pi_n against the source reference
  Trajectory source;              // xi_{n-1}
  std::string tag;                // id prefix, e.g. "" or "box_high_"
  // Constraint enablement: 1 applies the first-iteration schedule.
  int enablement = 1;
  std::optional<double> box_height;  // flip-up terrain, box always present
  bool generate = true;
};

struct IterationManifest {
  int iteration = 0;
  std::string status;             // "complete", "diverged", "rollout_unsuccessful"
  std::string error;
  std::string source_reference;
  std::string source_file;
  std::string policy;
  std::string checkpoint_file;
  std::string log_file;
  std::optional<std::string> generated_reference;
  std::optional<std::string> generated_file;
  bool promoted = false;
  int enablement = 1;
  std::string terrain;
  std::uint64_t seed = 0;
  std::string config_hash;
  int updates_done = 0;
  std::optional<Evaluation> evaluation;
  std::vector<RefinementOp> refinements;

  nlohmann::json to_json() const;
};

IterationManifest read_manifest(const std::filesystem::path& path);

// Trains pi_n on the source, evaluates it, generates the next reference by a
// deterministic nominal rollout, refines it and writes every artifact. A
// rollout that ends by a constraint is stored but not promoted unless the
// pipeline allows it. On divergence a partial manifest is written and
// TrainingDivergence is rethrown.
IterationManifest run_iteration(const ExperimentConfig& cfg, const IterationRequest& req,
                                const RunDir& dir, std::optional<Trajectory>* next = nullptr,
                                bool quiet = true);

// run_iteration with a box of the given height from the reference's apex x
// onward and step randomization off.
IterationManifest adapt_task(const ExperimentConfig& cfg, const Trajectory& reference,
                             double box_height, const RunDir& dir, const std::string& tag,
                             bool quiet = true);

// Terrain description with a box of height h from x onward (flat when h = 0).
std::string box_terrain(double x, double h);

// Chains cfg.pipeline.iterations iterations from xi_0. Stops early when a
// generated reference is not promoted.
std::vector<IterationManifest> run_pipeline(const ExperimentConfig& cfg, const Trajectory& xi0,
                                            const RunDir& dir, bool quiet = true);

}  // namespace imi
