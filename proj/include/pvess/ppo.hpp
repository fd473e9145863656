#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pvess/environment.hpp"
#include "pvess/neural.hpp"

namespace pvess {

enum class LrSchedule { kAdaptive, kConst1e2, kConst1e4, kDecay095 };

std::string to_string(LrSchedule kind);
LrSchedule parse_lr_schedule(const std::string& name);  // throws ValidationError

/// Learning rate for update `update` of `total_updates`.
///   adaptive:    base * (1 - update / total_updates)
///   const_1e-2:  1e-2
///   const_1e-4:  1e-4
///   decay_0.95:  base * 0.95^update
double lr_schedule(LrSchedule kind, long update, long total_updates, double base = 1e-4);

struct PpoConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  int epochs = 10;
  int minibatch = 64;
  int rollout = 2048;
  long total_steps = 200'000;
  LrSchedule schedule = LrSchedule::kAdaptive;
  double base_lr = 1e-4;
  double max_grad_norm = 0.5;
  double init_log_std = -0.6931471805599453;  // ln 0.5
  int hidden = 64;
  // Rewards are multiplied by this before advantage estimation; curves keep
  // the unscaled values.
  double reward_scale = 1.0;
};

void validate(const PpoConfig& config);

// Shared-encoder actor-critic. The policy mean is exactly
// policy_head(encoder(obs)), a linear map of the latent.
class ActorCritic {
 public:
  ActorCritic() = default;
  ActorCritic(int obs_dim, int action_dim, int hidden, double init_log_std, Rng& rng);

  [[nodiscard]] int obs_dim() const { return encoder_.input_width(); }
  [[nodiscard]] int action_dim() const { return policy_head_.output_width(); }
  [[nodiscard]] int latent_dim() const { return encoder_.output_width(); }

  [[nodiscard]] const Net& encoder() const { return encoder_; }
  [[nodiscard]] const Net& policy_head() const { return policy_head_; }
  [[nodiscard]] const Net& value_head() const { return value_head_; }
  [[nodiscard]] const Eigen::VectorXd& log_std() const { return log_std_; }

  [[nodiscard]] Eigen::VectorXd latent(const Eigen::VectorXd& obs) const;
  [[nodiscard]] Eigen::MatrixXd latent(const Eigen::MatrixXd& obs) const;
  [[nodiscard]] Eigen::VectorXd mean(const Eigen::VectorXd& obs) const;
  [[nodiscard]] double value(const Eigen::VectorXd& obs) const;

  [[nodiscard]] Eigen::Index parameter_count() const;
  // Layout: encoder | policy head | value head | log-std.
  [[nodiscard]] Eigen::VectorXd flat_params() const;
  void set_flat_params(const Eigen::VectorXd& flat);

  friend bool operator==(const ActorCritic& a, const ActorCritic& b) {
    return a.encoder_ == b.encoder_ && a.policy_head_ == b.policy_head_ &&
           a.value_head_ == b.value_head_ && a.log_std_ == b.log_std_;
  }

  friend void save_actor_critic(std::ostream& out, const ActorCritic& net);
  friend ActorCritic load_actor_critic(std::istream& in);

 private:
  Net encoder_;
  Net policy_head_;
  Net value_head_;
  Eigen::VectorXd log_std_;
};

void save_actor_critic(std::ostream& out, const ActorCritic& net);
ActorCritic load_actor_critic(std::istream& in);
void save_actor_critic(const std::string& path, const ActorCritic& net);
ActorCritic load_actor_critic(const std::string& path);

struct Advantages {
  Eigen::VectorXd advantages;
  Eigen::VectorXd targets;  // advantages + values
};

/// dones[t] marks that step t ended its episode; `bootstrap` is V of the
/// state following the final step when that step is not terminal.
Advantages gae_advantages(const Eigen::VectorXd& rewards, const Eigen::VectorXd& values,
                          const std::vector<bool>& dones, double bootstrap, double gamma,
                          double lambda);

/// Zero mean, unit variance (population) advantages.
Eigen::VectorXd normalize_advantages(const Eigen::VectorXd& advantages);

double clipped_surrogate(double ratio, double advantage, double clip);

struct PpoBatch {
  Eigen::MatrixXd obs;      // obs_dim x n
  Eigen::MatrixXd actions;  // action_dim x n
  Eigen::VectorXd old_log_prob;
  Eigen::VectorXd advantages;
  Eigen::VectorXd targets;
};

struct PpoLoss {
  double loss = 0.0;  // quantity minimised: -(surrogate - m1*value_err + m2*entropy)
  double surrogate = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  Eigen::VectorXd grad;  // same layout as ActorCritic::flat_params
};

PpoLoss ppo_loss(const PpoBatch& batch, const ActorCritic& net, const PpoConfig& config);

struct CurvePoint {
  long update = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ActorCritic net;
  std::vector<CurvePoint> curve;
};

using EnvFactory = std::function<std::unique_ptr<Environment>()>;

/// Fresh network with the initialisation `train` would start from.
ActorCritic initial_actor_critic(int obs_dim, int action_dim, const PpoConfig& config,
                                 std::uint64_t seed);

TrainResult train(const EnvFactory& make_env, const PpoConfig& config, std::uint64_t seed);

/// Deterministic return of `policy` (obs -> action) over `episodes` episodes.
double evaluate_policy(Environment& env, const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& policy,
                       int episodes, Rng& rng);

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path);

// Contextual toy market: the price alternates between a low and a high level
// every step; the single action is net selling in [-1, 1] and pays
// action * (price - mid). Optimal return is `horizon * (high - low) / 2`.
class TwoPriceCycleTask final : public Environment {
 public:
  explicit TwoPriceCycleTask(int horizon = 24, double low = 1.0, double high = 3.0)
      : horizon_(horizon), low_(low), high_(high) {}

  [[nodiscard]] int observation_dim() const override { return 1; }
  [[nodiscard]] int action_dim() const override { return 1; }
  Eigen::VectorXd reset(Rng& rng) override;
  Transition step(const Eigen::VectorXd& action) override;

  [[nodiscard]] double optimal_return() const { return horizon_ * (high_ - low_) / 2.0; }

 private:
  [[nodiscard]] Eigen::VectorXd observe() const;
  int horizon_;
  double low_;
  double high_;
  int t_ = 0;
  bool start_high_ = false;
};

}  // namespace pvess
