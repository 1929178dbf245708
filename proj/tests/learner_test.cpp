#include "imi/learner.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

using namespace imi;

namespace {

// Straightforward loop version of the forward pass, kept independent of Eigen
// expression code.
MatrixXd naive_forward(const Mlp& net, const MatrixXd& x) {
  MatrixXd a = x;
  for (int l = 0; l < net.layers(); ++l) {
    const auto W = net.weight(l);
    const auto b = net.bias(l);
    MatrixXd z(W.rows(), a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      for (Eigen::Index r = 0; r < W.rows(); ++r) {
        double s = b[r];
        for (Eigen::Index c = 0; c < W.cols(); ++c) s += W(r, c) * a(c, j);
        z(r, j) = l + 1 < net.layers() ? (s > 0 ? s : std::exp(s) - 1.0) : s;
      }
    }
    a = z;
  }
  return a;
}

Mlp random_net(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(1, 6), depth(1, 3);
  std::vector<int> sizes{d(rng)};
  const int n = depth(rng);
  for (int i = 0; i < n; ++i) sizes.push_back(d(rng));
  sizes.push_back(d(rng));
  Mlp net(sizes);
  net.init(rng, 1.3, 0.7);
  std::normal_distribution<double> g(0.0, 0.3);
  for (Eigen::Index i = 0; i < net.params().size(); ++i) net.params()[i] += g(rng);
  return net;
}

PolicyConfig small_policy() {
  PolicyConfig p;
  p.actor_hidden = {8, 6};
  p.critic_hidden = {7};
  return p;
}

PpoBatch random_batch(const ActorCritic& ac, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  PpoBatch b;
  b.obs = MatrixXd::NullaryExpr(kObsDim, n, [&] { return g(rng); });
  b.critic_obs = MatrixXd::NullaryExpr(kCriticObsDim, n, [&] { return g(rng); });
  const MatrixXd mu = ac.mean(b.obs);
  b.actions = mu + 0.4 * MatrixXd::NullaryExpr(kActionDim, n, [&] { return g(rng); });
  b.old_log_prob = ac.log_prob(mu, b.actions) + 0.1 * VectorXd::NullaryExpr(n, [&] { return g(rng); });
  b.advantages = VectorXd::NullaryExpr(n, [&] { return g(rng); });
  b.returns = VectorXd::NullaryExpr(n, [&] { return g(rng); });
  return b;
}

}  // namespace

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  Mlp net({4, 5, 3});
  const MatrixXd y = net.forward(MatrixXd::Ones(4, 2));
  EXPECT_EQ(y, MatrixXd::Zero(3, 2));
}

TEST(Mlp, HandComputedSingleLayer) {
  Mlp net({2, 1, 1});
  // W0 = [2, -1], b0 = 0.5, W1 = [3], b1 = -1
  net.params() << 2, -1, 0.5, 3, -1;
  MatrixXd x(2, 2);
  x << 1, 0, 1, 2;
  const MatrixXd y = net.forward(x);
  // col 0: z = 2 - 1 + .5 = 1.5 -> 1.5*3 - 1 = 3.5
  // col 1: z = 0 - 2 + .5 = -1.5 -> (e^-1.5 - 1)*3 - 1
  EXPECT_DOUBLE_EQ(y(0, 0), 3.5);
  EXPECT_NEAR(y(0, 1), (std::exp(-1.5) - 1.0) * 3.0 - 1.0, 1e-15);
}

TEST(Mlp, MatchesNaiveLoops) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    const Mlp net = random_net(rng);
    const MatrixXd x = MatrixXd::Random(net.input_size(), 5);
    EXPECT_LT((net.forward(x) - naive_forward(net, x)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Mlp, RejectsWrongInputSize) {
  Mlp net({3, 2});
  EXPECT_THROW(net.forward(MatrixXd::Zero(4, 1)), std::invalid_argument);
  EXPECT_THROW(Mlp({3}), std::invalid_argument);
  EXPECT_THROW(Mlp({3, 0, 1}), std::invalid_argument);
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const double h = 1e-5;
  for (int k = 0; k < 20; ++k) {
    Mlp net = random_net(rng);
    const MatrixXd x = MatrixXd::Random(net.input_size(), 3);
    const MatrixXd c = MatrixXd::Random(net.output_size(), 3);  // loss = sum(c .* y)
    MlpCache cache;
    net.forward(x, &cache);
    VectorXd grad = VectorXd::Zero(net.params().size());
    const MatrixXd dx = net.backward(cache, c, grad);
    auto loss = [&](const Mlp& n, const MatrixXd& in) { return (n.forward(in).array() * c.array()).sum(); };
    for (Eigen::Index i = 0; i < net.params().size(); ++i) {
      const double p0 = net.params()[i];
      net.params()[i] = p0 + h;
      const double lp = loss(net, x);
      net.params()[i] = p0 - h;
      const double lm = loss(net, x);
      net.params()[i] = p0;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "net " << k << " param " << i;
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      MatrixXd xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      const double fd = (loss(net, xp) - loss(net, xm)) / (2 * h);
      EXPECT_NEAR(dx.data()[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Mlp, BackwardZeroAndLinear) {
  std::mt19937_64 rng(5);
  const Mlp net = random_net(rng);
  const MatrixXd x = MatrixXd::Random(net.input_size(), 4);
  MlpCache cache;
  net.forward(x, &cache);
  VectorXd g0 = VectorXd::Zero(net.params().size());
  net.backward(cache, MatrixXd::Zero(net.output_size(), 4), g0);
  EXPECT_EQ(g0, VectorXd::Zero(g0.size()));

  const MatrixXd d = MatrixXd::Random(net.output_size(), 4);
  VectorXd g1 = VectorXd::Zero(g0.size()), g2 = VectorXd::Zero(g0.size());
  net.backward(cache, d, g1);
  net.backward(cache, 2.5 * d, g2);
  EXPECT_LT((g2 - 2.5 * g1).cwiseAbs().maxCoeff(), 1e-12);
  // backward accumulates
  net.backward(cache, d, g1);
  VectorXd g3 = VectorXd::Zero(g0.size());
  net.backward(cache, 2.0 * d, g3);
  EXPECT_LT((g1 - g3).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gae, LambdaZeroIsOneStepTd) {
  MatrixXd r(3, 1), v(3, 1), nv(3, 1), d = MatrixXd::Zero(3, 1);
  r << 1, 2, 3;
  v << 0.5, 0.2, -0.1;
  nv << 0.2, -0.1, 0.7;
  const GaeResult g = gae(r, v, nv, d, 0.9, 0.0);
  for (int t = 0; t < 3; ++t) EXPECT_DOUBLE_EQ(g.advantages(t, 0), r(t) + 0.9 * nv(t) - v(t));
  EXPECT_EQ(g.returns, g.advantages + v);
}

TEST(Gae, GammaZeroIsRewardMinusValue) {
  MatrixXd r = MatrixXd::Random(5, 2), v = MatrixXd::Random(5, 2), nv = MatrixXd::Random(5, 2);
  const GaeResult g = gae(r, v, nv, MatrixXd::Zero(5, 2), 0.0, 0.95);
  EXPECT_LT((g.advantages - (r - v)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Gae, MatchesBruteForceSum) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  const int T = 12;
  MatrixXd r(T, 1), v(T, 1), nv(T, 1), d = MatrixXd::Zero(T, 1);
  for (int t = 0; t < T; ++t) {
    r(t) = u(rng);
    v(t) = u(rng);
  }
  for (int t = 0; t + 1 < T; ++t) nv(t) = v(t + 1);
  nv(T - 1) = 0.3;
  d(4) = 1.0;  // termination after step 4
  nv(4) = 0.0;
  d(8) = 1.0;  // time-out after step 8, bootstrapped
  nv(8) = -0.6;
  const double gamma = 0.97, lambda = 0.9;
  const GaeResult g = gae(r, v, nv, d, gamma, lambda);
  for (int t = 0; t < T; ++t) {
    double a = 0.0, w = 1.0;
    for (int k = t; k < T; ++k) {
      a += w * (r(k) + gamma * nv(k) - v(k));
      if (d(k) > 0) break;
      w *= gamma * lambda;
    }
    EXPECT_NEAR(g.advantages(t), a, 1e-10) << t;
  }
  EXPECT_THROW(gae(r, v, nv, MatrixXd::Zero(T, 2), gamma, lambda), std::invalid_argument);
}

TEST(Normalize, MeanZeroStdOne) {
  VectorXd v(4);
  v << 1, 2, 3, 4;
  normalize(v);
  EXPECT_NEAR(v.mean(), 0.0, 1e-15);
  EXPECT_NEAR(std::sqrt(v.squaredNorm() / 4), 1.0, 1e-15);
  VectorXd c = VectorXd::Constant(3, 2.0);
  normalize(c);
  EXPECT_EQ(c, VectorXd::Zero(3));
}

TEST(Policy, LogProbMatchesClosedForm) {
  ActorCritic ac(small_policy(), 1);
  ac.log_std() << -0.5, 0.0, 0.3;
  MatrixXd mu(3, 1), a(3, 1);
  mu << 0.1, -0.2, 0.4;
  a << 0.3, 0.5, -1.0;
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double s = std::exp(ac.log_std()[i]);
    expect += -0.5 * std::pow((a(i) - mu(i)) / s, 2) - std::log(s) - 0.5 * std::log(2 * M_PI);
  }
  EXPECT_NEAR(ac.log_prob(mu, a)[0], expect, 1e-13);
  double h = 0.0;
  for (int i = 0; i < 3; ++i) h += 0.5 * std::log(2 * M_PI * M_E) + ac.log_std()[i];
  EXPECT_NEAR(ac.entropy(), h, 1e-13);
}

TEST(Policy, DeterministicActIsRepeatableAndMean) {
  ActorCritic ac(small_policy(), 2);
  std::mt19937_64 rng(1);
  const MatrixXd obs = MatrixXd::Random(kObsDim, 4), cobs = MatrixXd::Random(kCriticObsDim, 4);
  const auto a1 = ac.act(obs, cobs, false, rng);
  const auto a2 = ac.act(obs, cobs, false, rng);
  EXPECT_EQ(a1.action, a2.action);
  EXPECT_EQ(a1.action, ac.mean(obs));
  const ObsVec o = obs.col(0);
  EXPECT_EQ(ac.act_deterministic(o), Vec3(a1.action.col(0)));

  std::mt19937_64 r1(7), r2(7);
  EXPECT_EQ(ac.act(obs, cobs, true, r1).action, ac.act(obs, cobs, true, r2).action);
}

TEST(Policy, ActorIgnoresPrivilegedInputs) {
  ActorCritic ac(small_policy(), 3);
  std::mt19937_64 rng(1);
  const MatrixXd obs = MatrixXd::Random(kObsDim, 2);
  MatrixXd c1 = MatrixXd::Random(kCriticObsDim, 2), c2 = c1;
  c2.bottomRows(4).setConstant(9.0);
  const auto a1 = ac.act(obs, c1, false, rng), a2 = ac.act(obs, c2, false, rng);
  EXPECT_EQ(a1.action, a2.action);
  EXPECT_NE(a1.value, a2.value);
}

TEST(Policy, InitialActionsAreSmall) {
  ActorCritic ac(PolicyConfig{}, 4);
  const MatrixXd mu = ac.mean(MatrixXd::Random(kObsDim, 64));
  EXPECT_LT(mu.cwiseAbs().maxCoeff(), 0.2);
  EXPECT_EQ(ac.log_std(), VectorXd::Constant(3, -1.0));
}

TEST(Policy, FlatRoundTripAndClamp) {
  ActorCritic a(small_policy(), 5), b(small_policy(), 6);
  EXPECT_FALSE(a == b);
  b.set_flat(a.flat());
  EXPECT_TRUE(a == b);
  EXPECT_THROW(b.set_flat(VectorXd::Zero(3)), std::invalid_argument);
  b.log_std() << -9, 0, 4;
  b.clamp_log_std();
  EXPECT_EQ(b.log_std(), Eigen::Vector3d(-5, 0, 1));
}

TEST(Ppo, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  ActorCritic ac(small_policy(), 7);
  // Give the actor some non-trivial output so the mean path is exercised.
  std::normal_distribution<double> g(0.0, 0.2);
  for (Eigen::Index i = 0; i < ac.actor().params().size(); ++i) ac.actor().params()[i] += g(rng);
  const PpoBatch b = random_batch(ac, 16, rng);
  PpoConfig cfg;
  cfg.clip = 0.2;
  VectorXd grad;
  ppo_loss(ac, b, cfg, &grad);
  const VectorXd theta = ac.flat();
  const double h = 1e-6;
  int checked = 0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    VectorXd tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    ActorCritic p = ac, m = ac;
    p.set_flat(tp);
    m.set_flat(tm);
    const double fd = (ppo_loss(p, b, cfg).total - ppo_loss(m, b, cfg).total) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << i;
    ++checked;
  }
  EXPECT_EQ(checked, ac.num_params());
}

TEST(Ppo, ZeroAdvantageLeavesOnlyValueAndEntropy) {
  std::mt19937_64 rng(4);
  ActorCritic ac(small_policy(), 8);
  PpoBatch b = random_batch(ac, 10, rng);
  b.advantages.setZero();
  PpoConfig cfg;
  cfg.entropy_coef = 0.0;
  VectorXd grad;
  const PpoLoss L = ppo_loss(ac, b, cfg, &grad);
  EXPECT_DOUBLE_EQ(L.policy, 0.0);
  const Eigen::Index na = ac.actor().params().size();
  EXPECT_EQ(grad.head(na + 3), VectorXd::Zero(na + 3));
  EXPECT_GT(grad.tail(ac.critic().params().size()).norm(), 0.0);
}

TEST(Ppo, ClipStopsGradientOutsideTrustRegion) {
  // Two samples: one with ratio well above 1 + clip and positive advantage
  // (clipped, no policy gradient), one with ratio 1 (unclipped).
  ActorCritic ac(small_policy(), 9);
  PpoBatch b;
  b.obs = MatrixXd::Zero(kObsDim, 2);
  b.critic_obs = MatrixXd::Zero(kCriticObsDim, 2);
  const MatrixXd mu = ac.mean(b.obs);
  b.actions = mu;
  b.actions(0, 1) += 0.3;
  const VectorXd lp = ac.log_prob(mu, b.actions);
  b.old_log_prob = lp;
  b.old_log_prob[0] -= 1.0;  // ratio e
  b.advantages = Eigen::Vector2d(1.0, 0.0);
  b.returns = ac.value(b.critic_obs);
  PpoConfig cfg;
  cfg.entropy_coef = 0.0;
  VectorXd grad;
  const PpoLoss L = ppo_loss(ac, b, cfg, &grad);
  EXPECT_NEAR(L.policy, -0.5 * 1.2, 1e-12);
  EXPECT_DOUBLE_EQ(L.clip_fraction, 0.5);
  EXPECT_LT(grad.head(ac.actor().params().size() + 3).norm(), 1e-15);

  // Negative advantage with the same ratio is not clipped: min picks ratio*A.
  b.advantages = Eigen::Vector2d(-1.0, 0.0);
  const PpoLoss L2 = ppo_loss(ac, b, cfg, &grad);
  EXPECT_NEAR(L2.policy, 0.5 * std::exp(1.0), 1e-12);
  EXPECT_GT(grad.head(ac.actor().params().size() + 3).norm(), 0.0);
}

TEST(Ppo, UpdateReducesLoss) {
  std::mt19937_64 rng(12);
  ActorCritic ac(small_policy(), 10);
  const PpoBatch b = random_batch(ac, 64, rng);
  PpoConfig cfg;
  cfg.epochs = 10;
  cfg.minibatches = 1;
  const double before = ppo_loss(ac, b, cfg).total;
  Adam opt(ac.num_params());
  ppo_update(ac, opt, b, cfg, 1e-3, rng);
  EXPECT_LT(ppo_loss(ac, b, cfg).total, before);
  EXPECT_EQ(opt.steps(), 10);
}

TEST(Ppo, DivergenceIsReported) {
  std::mt19937_64 rng(13);
  ActorCritic ac(small_policy(), 11);
  PpoBatch b = random_batch(ac, 8, rng);
  b.returns[0] = std::numeric_limits<double>::quiet_NaN();
  Adam opt(ac.num_params());
  EXPECT_THROW(ppo_update(ac, opt, b, PpoConfig{}, 1e-3, rng), TrainingDivergence);
}

TEST(Ppo, ConfigValidationAndSchedule) {
  PpoConfig c;
  c.updates = 100;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 3e-4);
  EXPECT_DOUBLE_EQ(c.lr_at(50), 1.5e-4);
  EXPECT_DOUBLE_EQ(c.lr_at(100), 0.0);
  c.clip = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = PpoConfig{};
  c.gamma = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  Adam opt(3);
  VectorXd th = VectorXd::Zero(3);
  opt.step(th, Eigen::Vector3d(2.0, -0.01, 0.0), 0.1);
  EXPECT_NEAR(th[0], -0.1, 1e-8);
  EXPECT_NEAR(th[1], 0.1, 1e-6);
  EXPECT_DOUBLE_EQ(th[2], 0.0);
}

TEST(Adam, MinimizesQuadratic) {
  Adam opt(2);
  VectorXd th(2);
  th << 3, -2;
  for (int i = 0; i < 2000; ++i) opt.step(th, 2 * th, 0.05);
  EXPECT_LT(th.norm(), 1e-3);
}

TEST(Checkpoint, RoundTripIsExact) {
  ActorCritic ac(small_policy(), 12);
  ac.log_std() << -0.7, -1.1, 0.25;
  const auto path = std::filesystem::temp_directory_path() / "imi_ckpt_test.json";
  save_checkpoint(ac, path.string(), "abc123");
  std::string hash;
  const ActorCritic back = load_checkpoint(path.string(), &hash);
  EXPECT_TRUE(back == ac);
  EXPECT_EQ(hash, "abc123");
  EXPECT_EQ(back.config().actor_hidden, ac.config().actor_hidden);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = std::filesystem::temp_directory_path() / "imi_ckpt_bad.json";
  {
    std::ofstream(path) << "{\"format\": \"something-else\"}";
  }
  EXPECT_THROW(load_checkpoint(path.string()), std::runtime_error);
  {
    std::ofstream(path) << "{ not json";
  }
  EXPECT_THROW(load_checkpoint(path.string()), std::runtime_error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path.string()), std::runtime_error);
}

TEST(Trainer, SameSeedSameParameters) {
  auto cfg = std::make_shared<EnvConfig>(balance_task_config());
  auto ref = std::make_shared<Trajectory>(standing_reference(cfg->model, 2.0, cfg->policy_rate));
  TrainConfig tc;
  tc.num_envs = 4;
  tc.seed = 42;
  tc.ppo.horizon = 8;
  tc.ppo.updates = 3;
  tc.policy = small_policy();
  Trainer a(cfg, ref, tc), b(cfg, ref, tc);
  std::vector<std::string> rows_a, rows_b;
  a.run([&](const UpdateLog& u, const std::vector<EpisodeStats>&) { rows_a.push_back(update_csv_row(u)); });
  b.run([&](const UpdateLog& u, const std::vector<EpisodeStats>&) { rows_b.push_back(update_csv_row(u)); });
  EXPECT_TRUE(a.policy() == b.policy());
  EXPECT_EQ(rows_a, rows_b);
  EXPECT_EQ(rows_a.size(), 3u);
  tc.seed = 43;
  Trainer c(cfg, ref, tc);
  c.run(nullptr);
  EXPECT_FALSE(a.policy() == c.policy());
}

TEST(Trainer, LogHeaderMatchesRow) {
  UpdateLog u;
  auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(count(update_csv_header()), count(update_csv_row(u)));
}

TEST(Evaluate, RunsExactEpisodeCount) {
  auto cfg = std::make_shared<EnvConfig>(balance_task_config());
  auto ref = std::make_shared<Trajectory>(standing_reference(cfg->model, 1.0, cfg->policy_rate));
  ActorCritic ac(small_policy(), 1);
  const EvalSummary s = evaluate_policy(ac, cfg, ref, 7, false, 3, 3);
  EXPECT_EQ(s.episodes, 7);
  const EvalSummary t = evaluate_policy(ac, cfg, ref, 7, false, 3, 3);
  EXPECT_EQ(s.mean_return, t.mean_return);
}
