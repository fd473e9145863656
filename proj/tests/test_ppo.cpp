#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "pvess/ppo.hpp"
#include "support/finite_diff.hpp"

using namespace pvess;
using pvess::testing::max_relative_error;
using pvess::testing::numeric_gradient;

namespace {

// A_t = sum_k (gamma lambda)^k delta_{t+k}, stopping after the step that
// ends the episode.
Eigen::VectorXd brute_force_gae(const Eigen::VectorXd& r, const Eigen::VectorXd& v,
                                const std::vector<bool>& done, double bootstrap, double gamma,
                                double lambda) {
  const Eigen::Index n = r.size();
  Eigen::VectorXd delta(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double next = done[t] ? 0.0 : (t + 1 < n ? v[t + 1] : bootstrap);
    delta[t] = r[t] + gamma * next - v[t];
  }
  Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (Eigen::Index k = 0; t + k < n; ++k) {
      a[t] += std::pow(gamma * lambda, static_cast<double>(k)) * delta[t + k];
      if (done[t + k]) break;
    }
  }
  return a;
}

PpoBatch random_batch(const ActorCritic& net, int n, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  PpoBatch b{Eigen::MatrixXd(net.obs_dim(), n), Eigen::MatrixXd(net.action_dim(), n),
             Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < net.obs_dim(); ++d) b.obs(d, i) = z(rng);
    const Eigen::VectorXd mu = net.mean(b.obs.col(i));
    for (int d = 0; d < net.action_dim(); ++d) b.actions(d, i) = mu[d] + 0.5 * z(rng);
    // Old log-probabilities a little off the current ones so that some
    // samples sit on each branch of the clip, but never close enough to a
    // clip boundary for a finite-difference stencil to straddle the kink.
    const double lp = gaussian_logprob_and_entropy(net.log_std(), mu, b.actions.col(i)).log_prob;
    double ratio;
    do {
      b.old_log_prob[i] = lp + 0.3 * z(rng);
      ratio = std::exp(lp - b.old_log_prob[i]);
    } while (std::abs(ratio - 0.8) < 0.02 || std::abs(ratio - 1.2) < 0.02);
    b.advantages[i] = z(rng);
    b.targets[i] = z(rng);
  }
  return b;
}

}  // namespace

TEST(Gae, SingleTerminalStep) {
  const Advantages a = gae_advantages(Eigen::VectorXd::Constant(1, 1.0),
                                      Eigen::VectorXd::Constant(1, 0.5), {true}, 7.0, 0.99, 0.95);
  EXPECT_EQ(a.advantages[0], 0.5);
  EXPECT_EQ(a.targets[0], 1.0);
}

TEST(Gae, ZeroRewardsAndValues) {
  const Advantages a = gae_advantages(Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(5),
                                      std::vector<bool>(5, false), 0.0, 0.99, 0.95);
  EXPECT_TRUE(a.advantages.isZero(0.0));
}

TEST(Gae, MatchesBruteForceDoubleSum) {
  Rng rng(1);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution ends(0.15);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = trial < 10 ? 3 : 16;
    Eigen::VectorXd r(n), v(n);
    std::vector<bool> done(n);
    for (int t = 0; t < n; ++t) {
      r[t] = z(rng);
      v[t] = z(rng);
      done[t] = ends(rng);
    }
    const double bootstrap = z(rng);
    const Advantages a = gae_advantages(r, v, done, bootstrap, 0.99, 0.95);
    const Eigen::VectorXd b = brute_force_gae(r, v, done, bootstrap, 0.99, 0.95);
    EXPECT_LT((a.advantages - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((a.targets - (b + v)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Gae, RejectsLengthMismatch) {
  EXPECT_THROW(gae_advantages(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(2), {false, false, false},
                              0.0, 0.99, 0.95),
               std::invalid_argument);
}

TEST(Advantages, NormalizedToZeroMeanUnitVariance) {
  Rng rng(2);
  std::normal_distribution<double> z(3.0, 5.0);
  Eigen::VectorXd a(2048);
  for (auto& x : a) x = z(rng);
  const Eigen::VectorXd n = normalize_advantages(a);
  EXPECT_LT(std::abs(n.mean()), 1e-10);
  EXPECT_NEAR(n.array().square().mean(), 1.0, 1e-6);
}

TEST(Surrogate, ClipBranches) {
  EXPECT_NEAR(clipped_surrogate(1.5, 1.0, 0.2), 1.2, 1e-15);
  EXPECT_EQ(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
  EXPECT_EQ(clipped_surrogate(1.0, 0.37, 0.2), 0.37);
  EXPECT_NEAR(clipped_surrogate(0.5, -1.0, 0.2), -0.8, 1e-15);
}

TEST(Loss, RatioOneGivesMeanAdvantage) {
  Rng rng(3);
  const ActorCritic net(4, 4, 16, -0.69, rng);
  PpoBatch b = random_batch(net, 32, rng);
  for (int i = 0; i < 32; ++i) {
    b.old_log_prob[i] =
        gaussian_logprob_and_entropy(net.log_std(), net.mean(b.obs.col(i)), b.actions.col(i)).log_prob;
  }
  const PpoLoss l = ppo_loss(b, net, PpoConfig{});
  EXPECT_NEAR(l.surrogate, b.advantages.mean(), 1e-12);
}

TEST(Loss, ZeroCoefficientsLeaveSurrogate) {
  Rng rng(4);
  const ActorCritic net(4, 4, 16, -0.69, rng);
  const PpoBatch b = random_batch(net, 32, rng);
  PpoConfig c;
  c.value_coef = 0.0;
  c.entropy_coef = 0.0;
  const PpoLoss l = ppo_loss(b, net, c);
  double s = 0.0;
  for (int i = 0; i < 32; ++i) {
    const double lp =
        gaussian_logprob_and_entropy(net.log_std(), net.mean(b.obs.col(i)), b.actions.col(i)).log_prob;
    s += clipped_surrogate(std::exp(lp - b.old_log_prob[i]), b.advantages[i], c.clip);
  }
  EXPECT_NEAR(l.loss, -s / 32, 1e-12);
  EXPECT_GE(l.value_loss, 0.0);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  double worst = 0.0;
  for (int draw = 0; draw < 20; ++draw) {
    ActorCritic net(4, 4, 12, -0.5, rng);
    const PpoBatch b = random_batch(net, 4, rng);
    const PpoConfig c;
    const PpoLoss l = ppo_loss(b, net, c);
    ActorCritic probe = net;
    auto f = [&](const Eigen::VectorXd& p) {
      probe.set_flat_params(p);
      return ppo_loss(b, probe, c).loss;
    };
    worst = std::max(worst, max_relative_error(l.grad, numeric_gradient(f, net.flat_params())));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(LrSchedule, Values) {
  EXPECT_EQ(lr_schedule(LrSchedule::kAdaptive, 0, 100), 1e-4);
  EXPECT_EQ(lr_schedule(LrSchedule::kAdaptive, 100, 100), 0.0);
  EXPECT_NEAR(lr_schedule(LrSchedule::kAdaptive, 50, 100), 5e-5, 1e-20);
  EXPECT_EQ(lr_schedule(LrSchedule::kConst1e2, 7, 100), 1e-2);
  EXPECT_EQ(lr_schedule(LrSchedule::kConst1e4, 7, 100), 1e-4);
  EXPECT_NEAR(lr_schedule(LrSchedule::kDecay095, 2, 100), 1e-4 * 0.9025, 1e-20);
  EXPECT_THROW(lr_schedule(LrSchedule::kAdaptive, 101, 100), std::invalid_argument);
  EXPECT_THROW(parse_lr_schedule("cosine"), ValidationError);
  EXPECT_EQ(parse_lr_schedule(to_string(LrSchedule::kDecay095)), LrSchedule::kDecay095);
}

TEST(Config, Validation) {
  PpoConfig c;
  c.clip = 1.0;
  EXPECT_THROW(validate(c), ValidationError);
  c = PpoConfig{};
  c.gamma = 0.0;
  EXPECT_THROW(validate(c), ValidationError);
  c = PpoConfig{};
  c.reward_scale = 0.0;
  EXPECT_THROW(validate(c), ValidationError);
}

TEST(ActorCritic, PolicyMeanIsLinearInLatent) {
  Rng rng(6);
  const ActorCritic net(4, 4, 16, -0.69, rng);
  const Eigen::Vector4d obs(0.1, 0.9, 0.3, 0.5);
  const Eigen::VectorXd z = net.latent(Eigen::VectorXd(obs));
  const Eigen::VectorXd expected = net.policy_head().weight(0) * z + net.policy_head().bias(0);
  EXPECT_TRUE(net.mean(obs).isApprox(expected, 1e-15));
}

TEST(ActorCritic, CheckpointRoundTrip) {
  Rng rng(7);
  const ActorCritic net(4, 4, 16, -0.69, rng);
  std::stringstream ss;
  save_actor_critic(ss, net);
  EXPECT_EQ(load_actor_critic(ss), net);
}

TEST(Train, ZeroStepsReturnsInitialisation) {
  PpoConfig c;
  c.total_steps = 0;
  const TrainResult r = train([] { return std::make_unique<TwoPriceCycleTask>(); }, c, 9);
  EXPECT_EQ(r.net, initial_actor_critic(1, 1, c, 9));
  EXPECT_TRUE(r.curve.empty());
}

TEST(Train, SameSeedSameCurve) {
  PpoConfig c;
  c.total_steps = 4096;
  c.rollout = 1024;
  auto make = [] { return std::make_unique<TwoPriceCycleTask>(); };
  const TrainResult a = train(make, c, 9), b = train(make, c, 9);
  ASSERT_EQ(a.curve.size(), 4u);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].mean_reward, b.curve[i].mean_reward);
    EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
  }
  EXPECT_EQ(a.net, b.net);
}

TEST(Train, SolvesTwoPriceCycle) {
  PpoConfig c;
  c.total_steps = 50'000;
  const TrainResult r = train([] { return std::make_unique<TwoPriceCycleTask>(); }, c, 5);
  TwoPriceCycleTask env;
  Rng rng(1);
  const double ret = evaluate_policy(
      env, [&](const Eigen::VectorXd& o) { return r.net.mean(o); }, 5, rng);
  EXPECT_GE(ret, 0.9 * env.optimal_return());
}
