#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "imi/env.hpp"

namespace imi {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MlpCache {
  std::vector<MatrixXd> pre;   // pre-activations per layer
  std::vector<MatrixXd> post;  // post[0] is the input
};

// Fully connected net, ELU on hidden layers, identity output. Parameters live
// in one flat vector: per layer W (out x in, column-major) then b.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<int> sizes);

  void init(std::mt19937_64& rng, double hidden_gain, double output_gain);

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  int layers() const { return static_cast<int>(sizes_.size()) - 1; }

  VectorXd& params() { return params_; }
  const VectorXd& params() const { return params_; }

  // Columns are samples. The cache, when given, is filled for backward().
  MatrixXd forward(const MatrixXd& x, MlpCache* cache = nullptr) const;
  // Adds dLoss/dparams to grad (size params().size()); returns dLoss/dx.
  MatrixXd backward(const MlpCache& cache, const MatrixXd& dy, VectorXd& grad) const;

  Eigen::Map<const MatrixXd> weight(int layer) const;
  Eigen::Map<const VectorXd> bias(int layer) const;

 private:
  std::vector<int> sizes_;
  std::vector<Eigen::Index> offsets_;
  VectorXd params_;
};

double elu(double x);

struct PolicyConfig {
  std::vector<int> actor_hidden{128, 64, 64};
  std::vector<int> critic_hidden{128, 128, 64};
  double init_log_std = -1.0;
  double log_std_min = -5.0;
  double log_std_max = 1.0;

  void validate() const;
};

// Fixed per-entry input scaling so the network sees O(1) values.
VectorXd default_actor_input_scale();
VectorXd default_critic_input_scale();

// Diagonal Gaussian actor with state-independent log-std and a critic that
// reads the privileged observation.
class ActorCritic {
 public:
  ActorCritic() = default;
  ActorCritic(const PolicyConfig& cfg, std::uint64_t seed);

  MatrixXd mean(const MatrixXd& obs, MlpCache* cache = nullptr) const;
  VectorXd value(const MatrixXd& critic_obs, MlpCache* cache = nullptr) const;

  struct Act {
    MatrixXd action;    // 3 x B
    VectorXd log_prob;  // B
    VectorXd value;     // B
  };
  // Deterministic mode returns the mean and its log-density.
  Act act(const MatrixXd& obs, const MatrixXd& critic_obs, bool stochastic,
          std::mt19937_64& rng) const;
  Vec3 act_deterministic(const ObsVec& obs) const;

  VectorXd log_prob(const MatrixXd& mean, const MatrixXd& action) const;
  double entropy() const;

  Mlp& actor() { return actor_; }
  Mlp& critic() { return critic_; }
  const Mlp& actor() const { return actor_; }
  const Mlp& critic() const { return critic_; }
  VectorXd& log_std() { return log_std_; }
  const VectorXd& log_std() const { return log_std_; }
  const VectorXd& actor_scale() const { return actor_scale_; }
  const VectorXd& critic_scale() const { return critic_scale_; }
  const PolicyConfig& config() const { return cfg_; }

  // actor params, log-std, critic params.
  Eigen::Index num_params() const;
  VectorXd flat() const;
  void set_flat(const VectorXd& theta);
  void clamp_log_std();

  bool operator==(const ActorCritic& o) const;

 private:
  PolicyConfig cfg_;
  Mlp actor_;
  Mlp critic_;
  VectorXd log_std_;
  VectorXd actor_scale_;
  VectorXd critic_scale_;
};

struct GaeResult {
  MatrixXd advantages;
  MatrixXd returns;
};

// Rows are time, columns independent streams. next_values(t) is the value to
// bootstrap from after step t: V(s_{t+1}) inside an episode, 0 after a true
// termination, the critic's value of the final state after a time-out.
// done(t) cuts the lambda chain.
GaeResult gae(const MatrixXd& rewards, const MatrixXd& values, const MatrixXd& next_values,
              const MatrixXd& done, double gamma, double lambda);

// Mean 0, std 1 (population std; left unscaled when the std is ~0).
void normalize(VectorXd& v);

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  double learning_rate = 3e-4;
  double lr_final_fraction = 0.0;  // linear decay to this fraction of the start
  int epochs = 5;
  int minibatches = 4;
  int horizon = 24;
  double entropy_coef = 0.005;
  double value_coef = 1.0;
  double max_grad_norm = 1.0;
  int updates = 2000;

  void validate() const;
  double lr_at(int update) const;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(Eigen::Index n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(VectorXd& theta, const VectorXd& grad, double lr);
  long steps() const { return t_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  VectorXd m_, v_;
};

struct PpoBatch {
  MatrixXd obs;          // 12 x B
  MatrixXd critic_obs;   // 16 x B
  MatrixXd actions;      // 3 x B
  VectorXd old_log_prob;
  VectorXd advantages;   // normalized
  VectorXd returns;

  Eigen::Index size() const { return actions.cols(); }
  PpoBatch subset(const std::vector<Eigen::Index>& idx) const;
};

struct PpoLoss {
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double total = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// Loss on a batch; when grad is given it receives dTotal/dtheta in flat()
// order.
PpoLoss ppo_loss(const ActorCritic& ac, const PpoBatch& batch, const PpoConfig& cfg,
                 VectorXd* grad = nullptr);

class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PpoStats {
  PpoLoss mean;  // averaged over minibatch steps
  double grad_norm = 0.0;
};

PpoStats ppo_update(ActorCritic& ac, Adam& opt, const PpoBatch& batch, const PpoConfig& cfg,
                    double lr, std::mt19937_64& rng);

// Checkpoint: JSON with format version, architecture, scales, parameters and
// a hash of the experiment config that produced it.
void save_checkpoint(const ActorCritic& ac, const std::string& path, const std::string& config_hash);
ActorCritic load_checkpoint(const std::string& path, std::string* config_hash = nullptr);

struct TrainConfig {
  std::size_t num_envs = 256;
  int imi_iteration = 2;
  std::uint64_t seed = 1;
  PpoConfig ppo;
  PolicyConfig policy;
};

struct UpdateLog {
  int update = 0;
  std::size_t episodes = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  std::array<int, kNumCauses> causes{};
  ActiveConstraints constraints;
  double mean_step_reward = 0.0;
  double learning_rate = 0.0;
  PpoStats ppo;
};

std::string update_csv_header();
std::string update_csv_row(const UpdateLog& u);

class Trainer {
 public:
  Trainer(std::shared_ptr<const EnvConfig> env_cfg, std::shared_ptr<const Trajectory> ref,
          TrainConfig cfg);

  // Runs one update (collect + optimize) and returns its log row.
  UpdateLog step();
  void run(const std::function<void(const UpdateLog&, const std::vector<EpisodeStats>&)>& on_update);

  int update() const { return update_; }
  const ActorCritic& policy() const { return ac_; }
  ActorCritic& policy() { return ac_; }
  VecEnv& envs() { return envs_; }

 private:
  std::shared_ptr<const EnvConfig> env_cfg_;
  TrainConfig cfg_;
  VecEnv envs_;
  ActorCritic ac_;
  Adam opt_;
  std::mt19937_64 rng_;
  int update_ = 0;
  MatrixXd obs_;
  MatrixXd critic_obs_;
  std::vector<EpisodeStats> last_episodes_;
};

struct EvalSummary {
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double std_return = 0.0;
  std::array<int, kNumCauses> causes{};
  double peak_touchdown_speed = 0.0;
  double peak_torque = 0.0;
  double peak_power = 0.0;
};

// Runs `episodes` episodes on `n_envs` instances and summarizes them. The env
// config decides randomization; constraints are the final ones.
EvalSummary evaluate_policy(const ActorCritic& ac, std::shared_ptr<const EnvConfig> env_cfg,
                            std::shared_ptr<const Trajectory> ref, int episodes, bool stochastic,
                            std::uint64_t seed, std::size_t n_envs = 16);

}  // namespace imi
