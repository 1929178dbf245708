#include "imi/learner.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace imi {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

MatrixXd scale_rows(const MatrixXd& x, const VectorXd& s) { return s.asDiagonal() * x; }

}  // namespace

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

Mlp::Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need input and output sizes");
  for (int s : sizes_) {
    if (s <= 0) throw std::invalid_argument("Mlp: layer sizes must be positive");
  }
  Eigen::Index off = 0;
  for (int l = 0; l < layers(); ++l) {
    offsets_.push_back(off);
    off += static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1);
  }
  offsets_.push_back(off);
  params_ = VectorXd::Zero(off);
}

void Mlp::init(std::mt19937_64& rng, double hidden_gain, double output_gain) {
  for (int l = 0; l < layers(); ++l) {
    const double gain = l + 1 == layers() ? output_gain : hidden_gain;
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(sizes_[l])));
    const Eigen::Index nw = static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l];
    for (Eigen::Index i = 0; i < nw; ++i) params_[offsets_[l] + i] = n(rng);
    params_.segment(offsets_[l] + nw, sizes_[l + 1]).setZero();
  }
}

Eigen::Map<const MatrixXd> Mlp::weight(int l) const {
  return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
}

Eigen::Map<const VectorXd> Mlp::bias(int l) const {
  return {params_.data() + offsets_[l] + static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l],
          sizes_[l + 1]};
}

MatrixXd Mlp::forward(const MatrixXd& x, MlpCache* cache) const {
  if (sizes_.empty()) throw std::logic_error("Mlp: forward on an empty network");
  if (x.rows() != sizes_.front()) {
    throw std::invalid_argument("Mlp: input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(sizes_.front()));
  }
  if (cache) {
    cache->pre.clear();
    cache->post.clear();
    cache->post.push_back(x);
  }
  MatrixXd a = x;
  for (int l = 0; l < layers(); ++l) {
    MatrixXd z = weight(l) * a;
    z.colwise() += bias(l);
    if (l + 1 < layers()) {
      a = z.unaryExpr([](double v) { return elu(v); });
    } else {
      a = z;
    }
    if (cache) {
      cache->pre.push_back(std::move(z));
      cache->post.push_back(a);
    }
  }
  return a;
}

MatrixXd Mlp::backward(const MlpCache& cache, const MatrixXd& dy, VectorXd& grad) const {
  if (grad.size() != params_.size()) throw std::invalid_argument("Mlp: gradient size mismatch");
  if (static_cast<int>(cache.pre.size()) != layers()) throw std::invalid_argument("Mlp: stale cache");
  MatrixXd dz = dy;
  for (int l = layers() - 1; l >= 0; --l) {
    const Eigen::Index nw = static_cast<Eigen::Index>(sizes_[l + 1]) * sizes_[l];
    Eigen::Map<MatrixXd> gw(grad.data() + offsets_[l], sizes_[l + 1], sizes_[l]);
    gw.noalias() += dz * cache.post[l].transpose();
    grad.segment(offsets_[l] + nw, sizes_[l + 1]) += dz.rowwise().sum();
    MatrixXd da = weight(l).transpose() * dz;
    if (l > 0) {
      const MatrixXd& z = cache.pre[l - 1];
      dz = da.binaryExpr(z, [](double g, double v) { return v > 0.0 ? g : g * std::exp(v); });
    } else {
      dz = std::move(da);
    }
  }
  return dz;
}

void PolicyConfig::validate() const {
  for (const auto* h : {&actor_hidden, &critic_hidden}) {
    for (int s : *h) {
      if (s <= 0) throw std::invalid_argument("policy: hidden sizes must be positive");
    }
  }
  if (!(log_std_min < log_std_max) || init_log_std < log_std_min || init_log_std > log_std_max) {
    throw std::invalid_argument("policy: init_log_std must lie in [log_std_min, log_std_max]");
  }
}

VectorXd default_actor_input_scale() {
  VectorXd s(kObsDim);
  s << 1.0, 1.0, 0.2, 0.2, 0.05, 0.25, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0;
  return s;
}

VectorXd default_critic_input_scale() {
  VectorXd s(kCriticObsDim);
  s << default_actor_input_scale(), 0.5, 0.5, 0.25, 1.0;
  return s;
}

ActorCritic::ActorCritic(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::vector<int> a{kObsDim}, c{kCriticObsDim};
  a.insert(a.end(), cfg.actor_hidden.begin(), cfg.actor_hidden.end());
  a.push_back(kActionDim);
  c.insert(c.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
  c.push_back(1);
  actor_ = Mlp(a);
  critic_ = Mlp(c);
  std::mt19937_64 rng(seed);
  actor_.init(rng, std::sqrt(2.0), 0.01);
  critic_.init(rng, std::sqrt(2.0), 1.0);
  log_std_ = VectorXd::Constant(kActionDim, cfg.init_log_std);
  actor_scale_ = default_actor_input_scale();
  critic_scale_ = default_critic_input_scale();
}

MatrixXd ActorCritic::mean(const MatrixXd& obs, MlpCache* cache) const {
  return actor_.forward(scale_rows(obs, actor_scale_), cache);
}

VectorXd ActorCritic::value(const MatrixXd& critic_obs, MlpCache* cache) const {
  return critic_.forward(scale_rows(critic_obs, critic_scale_), cache).row(0).transpose();
}

VectorXd ActorCritic::log_prob(const MatrixXd& mu, const MatrixXd& action) const {
  const VectorXd inv_std = (-log_std_).array().exp();
  const MatrixXd z = inv_std.asDiagonal() * (action - mu);
  return (-0.5 * z.array().square().colwise().sum()).transpose() -
         VectorXd::Constant(action.cols(), log_std_.sum() + kActionDim * kLogSqrt2Pi).array();
}

double ActorCritic::entropy() const {
  return log_std_.sum() + kActionDim * (0.5 + kLogSqrt2Pi);
}

ActorCritic::Act ActorCritic::act(const MatrixXd& obs, const MatrixXd& critic_obs, bool stochastic,
                                  std::mt19937_64& rng) const {
  Act out;
  const MatrixXd mu = mean(obs);
  out.action = mu;
  if (stochastic) {
    std::normal_distribution<double> n(0.0, 1.0);
    const VectorXd std = log_std_.array().exp();
    for (Eigen::Index j = 0; j < mu.cols(); ++j) {
      for (Eigen::Index i = 0; i < mu.rows(); ++i) out.action(i, j) += std[i] * n(rng);
    }
  }
  out.log_prob = log_prob(mu, out.action);
  out.value = value(critic_obs);
  return out;
}

Vec3 ActorCritic::act_deterministic(const ObsVec& obs) const {
  const MatrixXd mu = mean(MatrixXd(obs));
  return Vec3(mu(0, 0), mu(1, 0), mu(2, 0));
}

Eigen::Index ActorCritic::num_params() const {
  return actor_.params().size() + log_std_.size() + critic_.params().size();
}

VectorXd ActorCritic::flat() const {
  VectorXd t(num_params());
  t << actor_.params(), log_std_, critic_.params();
  return t;
}

void ActorCritic::set_flat(const VectorXd& t) {
  if (t.size() != num_params()) throw std::invalid_argument("ActorCritic: parameter size mismatch");
  const Eigen::Index na = actor_.params().size(), ns = log_std_.size();
  actor_.params() = t.head(na);
  log_std_ = t.segment(na, ns);
  critic_.params() = t.tail(critic_.params().size());
}

void ActorCritic::clamp_log_std() {
  log_std_ = log_std_.cwiseMax(cfg_.log_std_min).cwiseMin(cfg_.log_std_max);
}

bool ActorCritic::operator==(const ActorCritic& o) const {
  return actor_.sizes() == o.actor_.sizes() && critic_.sizes() == o.critic_.sizes() &&
         flat() == o.flat() && actor_scale_ == o.actor_scale_ && critic_scale_ == o.critic_scale_;
}

GaeResult gae(const MatrixXd& rewards, const MatrixXd& values, const MatrixXd& next_values,
              const MatrixXd& done, double gamma, double lambda) {
  const Eigen::Index T = rewards.rows(), N = rewards.cols();
  for (const MatrixXd* m : {&values, &next_values, &done}) {
    if (m->rows() != T || m->cols() != N) throw std::invalid_argument("gae: shape mismatch");
  }
  GaeResult out;
  out.advantages.resize(T, N);
  for (Eigen::Index j = 0; j < N; ++j) {
    double running = 0.0;
    for (Eigen::Index t = T - 1; t >= 0; --t) {
      const double delta = rewards(t, j) + gamma * next_values(t, j) - values(t, j);
      running = delta + gamma * lambda * (1.0 - done(t, j)) * running;
      out.advantages(t, j) = running;
    }
  }
  out.returns = out.advantages + values;
  return out;
}

void normalize(VectorXd& v) {
  if (v.size() == 0) return;
  const double mean = v.mean();
  v.array() -= mean;
  const double sd = std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
  if (sd > 1e-8) v /= sd;
}

void PpoConfig::validate() const {
  if (!(gamma >= 0 && gamma < 1) || !(lambda >= 0 && lambda < 1)) {
    throw std::invalid_argument("ppo: gamma and lambda must be in [0, 1)");
  }
  if (!(clip > 0)) throw std::invalid_argument("ppo: clip must be > 0");
  if (!(learning_rate > 0)) throw std::invalid_argument("ppo: learning_rate must be > 0");
  if (!(lr_final_fraction >= 0 && lr_final_fraction <= 1)) {
    throw std::invalid_argument("ppo: lr_final_fraction must be in [0, 1]");
  }
  if (epochs < 1 || minibatches < 1 || horizon < 1 || updates < 1) {
    throw std::invalid_argument("ppo: counts must be positive");
  }
  if (!(entropy_coef >= 0) || !(value_coef >= 0) || !(max_grad_norm > 0)) {
    throw std::invalid_argument("ppo: coefficients must be >= 0 and max_grad_norm > 0");
  }
}

double PpoConfig::lr_at(int update) const {
  const double f = std::clamp(static_cast<double>(update) / updates, 0.0, 1.0);
  return learning_rate * (1.0 - f * (1.0 - lr_final_fraction));
}

Adam::Adam(Eigen::Index n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(VectorXd::Zero(n)), v_(VectorXd::Zero(n)) {}

void Adam::step(VectorXd& theta, const VectorXd& grad, double lr) {
  if (grad.size() != m_.size() || theta.size() != m_.size()) {
    throw std::invalid_argument("Adam: size mismatch");
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  theta.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

PpoBatch PpoBatch::subset(const std::vector<Eigen::Index>& idx) const {
  PpoBatch b;
  const auto m = static_cast<Eigen::Index>(idx.size());
  b.obs.resize(obs.rows(), m);
  b.critic_obs.resize(critic_obs.rows(), m);
  b.actions.resize(actions.rows(), m);
  b.old_log_prob.resize(m);
  b.advantages.resize(m);
  b.returns.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index i = idx[static_cast<std::size_t>(k)];
    b.obs.col(k) = obs.col(i);
    b.critic_obs.col(k) = critic_obs.col(i);
    b.actions.col(k) = actions.col(i);
    b.old_log_prob[k] = old_log_prob[i];
    b.advantages[k] = advantages[i];
    b.returns[k] = returns[i];
  }
  return b;
}

PpoLoss ppo_loss(const ActorCritic& ac, const PpoBatch& b, const PpoConfig& cfg, VectorXd* grad) {
  const Eigen::Index m = b.size();
  if (m == 0) throw std::invalid_argument("ppo_loss: empty batch");
  const double inv_m = 1.0 / static_cast<double>(m);
  MlpCache actor_cache, critic_cache;
  const MatrixXd mu = ac.mean(b.obs, grad ? &actor_cache : nullptr);
  const VectorXd v = ac.value(b.critic_obs, grad ? &critic_cache : nullptr);
  const VectorXd logp = ac.log_prob(mu, b.actions);

  PpoLoss L;
  VectorXd dlogp(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double log_ratio = logp[i] - b.old_log_prob[i];
    const double ratio = std::exp(log_ratio);
    const double a = b.advantages[i];
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    const double s1 = ratio * a, s2 = clipped * a;
    L.policy -= std::min(s1, s2) * inv_m;
    // The unclipped branch carries the gradient unless clipping binds.
    dlogp[i] = s1 <= s2 ? -a * ratio * inv_m : 0.0;
    L.approx_kl += ((ratio - 1.0) - log_ratio) * inv_m;
    if (std::abs(ratio - 1.0) > cfg.clip) L.clip_fraction += inv_m;
  }
  const VectorXd verr = v - b.returns;
  L.value = verr.squaredNorm() * inv_m;
  L.entropy = ac.entropy();
  L.total = L.policy + cfg.value_coef * L.value - cfg.entropy_coef * L.entropy;
  if (!std::isfinite(L.total)) return L;

  if (grad) {
    grad->setZero(ac.num_params());
    const Eigen::Index na = ac.actor().params().size();
    const Eigen::Index nc = ac.critic().params().size();
    const VectorXd inv_var = (-2.0 * ac.log_std()).array().exp();
    const MatrixXd diff = b.actions - mu;
    // d logp / d mu = (a - mu) / sigma^2 ; the actor input was pre-scaled.
    const MatrixXd dmu = inv_var.asDiagonal() * diff * dlogp.asDiagonal();
    VectorXd ga = VectorXd::Zero(na);
    ac.actor().backward(actor_cache, dmu, ga);
    grad->head(na) = ga;
    // d logp / d log_std_k = z_k^2 - 1
    const MatrixXd z2 = (inv_var.asDiagonal() * diff.cwiseAbs2());
    for (int k = 0; k < kActionDim; ++k) {
      (*grad)[na + k] = ((z2.row(k).transpose().array() - 1.0) * dlogp.array()).sum() -
                        cfg.entropy_coef;
    }
    VectorXd gc = VectorXd::Zero(nc);
    const MatrixXd dv = (2.0 * cfg.value_coef * inv_m) * verr.transpose();
    ac.critic().backward(critic_cache, dv, gc);
    grad->tail(nc) = gc;
  }
  return L;
}

PpoStats ppo_update(ActorCritic& ac, Adam& opt, const PpoBatch& batch, const PpoConfig& cfg,
                    double lr, std::mt19937_64& rng) {
  const Eigen::Index n = batch.size();
  const Eigen::Index mb = std::max<Eigen::Index>(1, n / cfg.minibatches);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  PpoStats stats;
  int count = 0;
  VectorXd grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int k = 0; k < cfg.minibatches; ++k) {
      const Eigen::Index begin = k * mb;
      const Eigen::Index end = k + 1 == cfg.minibatches ? n : std::min(n, begin + mb);
      if (begin >= end) continue;
      std::vector<Eigen::Index> idx(perm.begin() + begin, perm.begin() + end);
      const PpoBatch sub = batch.subset(idx);
      const PpoLoss L = ppo_loss(ac, sub, cfg, &grad);
      if (!std::isfinite(L.total) || !grad.allFinite()) {
        std::ostringstream os;
        os << "non-finite PPO loss (policy " << L.policy << ", value " << L.value << ", entropy "
           << L.entropy << ") at epoch " << epoch << " minibatch " << k;
        throw TrainingDivergence(os.str());
      }
      const double norm = grad.norm();
      if (norm > cfg.max_grad_norm) grad *= cfg.max_grad_norm / norm;
      VectorXd theta = ac.flat();
      opt.step(theta, grad, lr);
      ac.set_flat(theta);
      ac.clamp_log_std();

      stats.mean.policy += L.policy;
      stats.mean.value += L.value;
      stats.mean.entropy += L.entropy;
      stats.mean.total += L.total;
      stats.mean.approx_kl += L.approx_kl;
      stats.mean.clip_fraction += L.clip_fraction;
      stats.grad_norm += norm;
      ++count;
    }
  }
  if (count > 0) {
    const double c = 1.0 / count;
    stats.mean.policy *= c;
    stats.mean.value *= c;
    stats.mean.entropy *= c;
    stats.mean.total *= c;
    stats.mean.approx_kl *= c;
    stats.mean.clip_fraction *= c;
    stats.grad_norm *= c;
  }
  return stats;
}

namespace {

nlohmann::json to_json(const VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

VectorXd vec_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void save_checkpoint(const ActorCritic& ac, const std::string& path, const std::string& config_hash) {
  nlohmann::json j;
  j["format"] = "imi-checkpoint";
  j["version"] = 1;
  j["config_hash"] = config_hash;
  j["actor_sizes"] = ac.actor().sizes();
  j["critic_sizes"] = ac.critic().sizes();
  j["log_std_min"] = ac.config().log_std_min;
  j["log_std_max"] = ac.config().log_std_max;
  j["init_log_std"] = ac.config().init_log_std;
  j["actor_scale"] = to_json(ac.actor_scale());
  j["critic_scale"] = to_json(ac.critic_scale());
  j["actor"] = to_json(ac.actor().params());
  j["log_std"] = to_json(ac.log_std());
  j["critic"] = to_json(ac.critic().params());

  const std::filesystem::path p(path);
  const std::filesystem::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << j.dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

ActorCritic load_checkpoint(const std::string& path, std::string* config_hash) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path + ": " + e.what());
  }
  if (j.value("format", "") != "imi-checkpoint" || j.value("version", 0) != 1) {
    throw std::runtime_error("checkpoint " + path + ": unsupported format or version");
  }
  const auto actor_sizes = j.at("actor_sizes").get<std::vector<int>>();
  const auto critic_sizes = j.at("critic_sizes").get<std::vector<int>>();
  if (actor_sizes.size() < 2 || actor_sizes.front() != kObsDim || actor_sizes.back() != kActionDim ||
      critic_sizes.size() < 2 || critic_sizes.front() != kCriticObsDim || critic_sizes.back() != 1) {
    throw std::runtime_error("checkpoint " + path + ": network shapes do not match this build");
  }
  PolicyConfig cfg;
  cfg.actor_hidden.assign(actor_sizes.begin() + 1, actor_sizes.end() - 1);
  cfg.critic_hidden.assign(critic_sizes.begin() + 1, critic_sizes.end() - 1);
  cfg.log_std_min = j.at("log_std_min").get<double>();
  cfg.log_std_max = j.at("log_std_max").get<double>();
  cfg.init_log_std = j.at("init_log_std").get<double>();
  ActorCritic ac(cfg, 0);
  VectorXd theta(ac.num_params());
  const VectorXd a = vec_from_json(j.at("actor")), s = vec_from_json(j.at("log_std")),
                 c = vec_from_json(j.at("critic"));
  if (a.size() + s.size() + c.size() != theta.size()) {
    throw std::runtime_error("checkpoint " + path + ": parameter count mismatch");
  }
  theta << a, s, c;
  ac.set_flat(theta);
  const VectorXd as = vec_from_json(j.at("actor_scale")), cs = vec_from_json(j.at("critic_scale"));
  if (as != ac.actor_scale() || cs != ac.critic_scale()) {
    throw std::runtime_error("checkpoint " + path + ": input scaling differs from this build");
  }
  if (config_hash) *config_hash = j.value("config_hash", "");
  return ac;
}

std::string update_csv_header() {
  std::string h = "update,episodes,mean_return,success_rate";
  for (int c = 0; c < kNumCauses; ++c) h += std::string(",n_") + cause_name(static_cast<TerminationCause>(c));
  for (int c = 0; c < kNumConstraintCauses; ++c) {
    h += std::string(",on_") + cause_name(static_cast<TerminationCause>(c));
  }
  h += ",touchdown_limit,power_limit,torque_limit,wheel_velocity_limit,deviation_position_limit,"
       "deviation_orientation_limit,mean_step_reward,learning_rate,policy_loss,value_loss,entropy,"
       "approx_kl,clip_fraction,grad_norm";
  return h;
}

std::string update_csv_row(const UpdateLog& u) {
  std::ostringstream os;
  os.precision(10);
  os << u.update << ',' << u.episodes << ',' << u.mean_return << ',' << u.success_rate;
  for (int c : u.causes) os << ',' << c;
  for (bool on : u.constraints.enabled) os << ',' << int(on);
  const ActiveConstraints& k = u.constraints;
  os << ',' << k.touchdown_speed << ',' << k.power << ',' << k.torque << ',' << k.wheel_velocity
     << ',' << k.deviation_position << ',' << k.deviation_orientation << ',' << u.mean_step_reward
     << ',' << u.learning_rate << ',' << u.ppo.mean.policy << ',' << u.ppo.mean.value << ','
     << u.ppo.mean.entropy << ',' << u.ppo.mean.approx_kl << ',' << u.ppo.mean.clip_fraction << ','
     << u.ppo.grad_norm;
  return os.str();
}

Trainer::Trainer(std::shared_ptr<const EnvConfig> env_cfg, std::shared_ptr<const Trajectory> ref,
                 TrainConfig cfg)
    : env_cfg_(env_cfg),
      cfg_(std::move(cfg)),
      envs_(env_cfg, std::move(ref), cfg_.num_envs, instance_seed(cfg_.seed, 0x5eed)),
      ac_(cfg_.policy, instance_seed(cfg_.seed, 0xac)),
      opt_(ac_.num_params()),
      rng_(instance_seed(cfg_.seed, 0x7a)) {
  cfg_.ppo.validate();
  env_cfg_->validate();
  envs_.set_constraints(resolve_constraints(env_cfg_->constraints, cfg_.imi_iteration, 0,
                                            cfg_.ppo.updates));
  envs_.set_smoothness_weight(env_cfg_->reward.w_smoothness_initial);
  obs_ = envs_.reset();
  critic_obs_ = envs_.critic_observations();
}

UpdateLog Trainer::step() {
  const PpoConfig& p = cfg_.ppo;
  UpdateLog log;
  log.update = update_;
  log.constraints = resolve_constraints(env_cfg_->constraints, cfg_.imi_iteration, update_, p.updates);
  envs_.set_constraints(log.constraints);
  const double progress = static_cast<double>(update_) / std::max(1, p.updates - 1);
  const RewardConfig& rc = env_cfg_->reward;
  envs_.set_smoothness_weight(rc.w_smoothness_initial +
                              std::min(progress, 1.0) * (rc.w_smoothness_final - rc.w_smoothness_initial));

  const Eigen::Index N = static_cast<Eigen::Index>(envs_.size());
  const int T = p.horizon;
  MatrixXd rewards(T, N), values(T, N), next_values(T, N), done(T, N);
  PpoBatch batch;
  batch.obs.resize(kObsDim, T * N);
  batch.critic_obs.resize(kCriticObsDim, T * N);
  batch.actions.resize(kActionDim, T * N);
  batch.old_log_prob.resize(T * N);

  for (int t = 0; t < T; ++t) {
    const ActorCritic::Act a = ac_.act(obs_, critic_obs_, true, rng_);
    batch.obs.middleCols(t * N, N) = obs_;
    batch.critic_obs.middleCols(t * N, N) = critic_obs_;
    batch.actions.middleCols(t * N, N) = a.action;
    batch.old_log_prob.segment(t * N, N) = a.log_prob;
    values.row(t) = a.value.transpose();

    VecEnv::Step s = envs_.step(a.action);
    rewards.row(t) = s.reward.transpose();
    const VectorXd v_next = ac_.value(s.critic_obs);
    std::vector<Eigen::Index> timeouts;
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto k = static_cast<std::size_t>(i);
      done(t, i) = s.done[k] ? 1.0 : 0.0;
      next_values(t, i) = s.done[k] ? 0.0 : v_next[i];
      if (s.timeout[k]) timeouts.push_back(i);
    }
    if (!timeouts.empty()) {
      MatrixXd term(kCriticObsDim, static_cast<Eigen::Index>(timeouts.size()));
      for (std::size_t k = 0; k < timeouts.size(); ++k) {
        term.col(static_cast<Eigen::Index>(k)) = s.terminal_critic_obs.col(timeouts[k]);
      }
      const VectorXd vt = ac_.value(term);
      for (std::size_t k = 0; k < timeouts.size(); ++k) {
        next_values(t, timeouts[k]) = vt[static_cast<Eigen::Index>(k)];
      }
    }
    obs_ = std::move(s.obs);
    critic_obs_ = std::move(s.critic_obs);
  }

  const GaeResult g = gae(rewards, values, next_values, done, p.gamma, p.lambda);
  batch.advantages.resize(T * N);
  batch.returns.resize(T * N);
  for (int t = 0; t < T; ++t) {
    batch.advantages.segment(t * N, N) = g.advantages.row(t).transpose();
    batch.returns.segment(t * N, N) = g.returns.row(t).transpose();
  }
  normalize(batch.advantages);

  log.learning_rate = p.lr_at(update_);
  log.ppo = ppo_update(ac_, opt_, batch, p, log.learning_rate, rng_);
  log.mean_step_reward = rewards.mean();

  last_episodes_ = envs_.drain_episodes();
  log.episodes = last_episodes_.size();
  int successes = 0;
  for (const EpisodeStats& e : last_episodes_) {
    log.mean_return += e.ret;
    if (e.success) ++successes;
    if (e.cause) ++log.causes[static_cast<int>(*e.cause)];
  }
  if (log.episodes > 0) {
    log.mean_return /= static_cast<double>(log.episodes);
    log.success_rate = static_cast<double>(successes) / static_cast<double>(log.episodes);
  }
  ++update_;
  return log;
}

void Trainer::run(
    const std::function<void(const UpdateLog&, const std::vector<EpisodeStats>&)>& on_update) {
  while (update_ < cfg_.ppo.updates) {
    const UpdateLog log = step();
    if (on_update) on_update(log, last_episodes_);
  }
}

EvalSummary evaluate_policy(const ActorCritic& ac, std::shared_ptr<const EnvConfig> env_cfg,
                            std::shared_ptr<const Trajectory> ref, int episodes, bool stochastic,
                            std::uint64_t seed, std::size_t n_envs) {
  EvalSummary out;
  if (episodes <= 0) return out;
  n_envs = std::min<std::size_t>(std::max<std::size_t>(n_envs, 1), static_cast<std::size_t>(episodes));
  std::vector<FlipEnv> envs;
  std::vector<int> quota(n_envs, episodes / static_cast<int>(n_envs));
  for (std::size_t i = 0; i < static_cast<std::size_t>(episodes) % n_envs; ++i) ++quota[i];
  const ActiveConstraints fin = final_constraints(env_cfg->constraints);
  for (std::size_t i = 0; i < n_envs; ++i) {
    envs.emplace_back(env_cfg, ref, instance_seed(seed, i), i);
    envs.back().set_rsi(false);
    envs.back().set_constraints(fin);
    envs.back().set_smoothness_weight(env_cfg->reward.w_smoothness_final);
  }
  std::mt19937_64 rng(instance_seed(seed, 0xe7a1));
  std::vector<ObsVec> obs(n_envs);
  std::vector<EpisodeStats> finished;
  for (std::size_t i = 0; i < n_envs; ++i) obs[i] = envs[i].reset();

  while (true) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n_envs; ++i) {
      if (quota[i] > 0) active.push_back(i);
    }
    if (active.empty()) break;
    MatrixXd o(kObsDim, static_cast<Eigen::Index>(active.size()));
    MatrixXd co(kCriticObsDim, static_cast<Eigen::Index>(active.size()));
    for (std::size_t k = 0; k < active.size(); ++k) {
      o.col(static_cast<Eigen::Index>(k)) = obs[active[k]];
      co.col(static_cast<Eigen::Index>(k)) = envs[active[k]].critic_observation();
    }
    const ActorCritic::Act a = ac.act(o, co, stochastic, rng);
    for (std::size_t k = 0; k < active.size(); ++k) {
      FlipEnv& e = envs[active[k]];
      obs[active[k]] = e.step(a.action.col(static_cast<Eigen::Index>(k)), nullptr, nullptr);
      if (e.done()) {
        finished.push_back(e.episode());
        if (--quota[active[k]] > 0) obs[active[k]] = e.reset();
      }
    }
  }

  out.episodes = static_cast<int>(finished.size());
  double sum = 0.0, sum2 = 0.0;
  for (const EpisodeStats& e : finished) {
    sum += e.ret;
    sum2 += e.ret * e.ret;
    if (e.success) ++out.successes;
    if (e.cause) ++out.causes[static_cast<int>(*e.cause)];
    out.peak_touchdown_speed = std::max(out.peak_touchdown_speed, e.peak_touchdown_speed);
    out.peak_torque = std::max(out.peak_torque, e.peak_torque);
    out.peak_power = std::max(out.peak_power, e.peak_power);
  }
  out.success_rate = static_cast<double>(out.successes) / out.episodes;
  out.mean_return = sum / out.episodes;
  out.std_return = std::sqrt(std::max(0.0, sum2 / out.episodes - out.mean_return * out.mean_return));
  return out;
}

}  // namespace imi
