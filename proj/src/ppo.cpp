#include "pvess/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pvess/error.hpp"

namespace pvess {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Independent streams per purpose so that, e.g., changing the minibatch size
// does not perturb the environment's reset sequence.
Rng stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return Rng(seq);
}

}  // namespace

std::string to_string(LrSchedule kind) {
  switch (kind) {
    case LrSchedule::kAdaptive: return "adaptive";
    case LrSchedule::kConst1e2: return "const_1e-2";
    case LrSchedule::kConst1e4: return "const_1e-4";
    case LrSchedule::kDecay095: return "decay_0.95";
  }
  return "?";
}

LrSchedule parse_lr_schedule(const std::string& name) {
  for (auto k : {LrSchedule::kAdaptive, LrSchedule::kConst1e2, LrSchedule::kConst1e4,
                 LrSchedule::kDecay095}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown learning-rate schedule '" + name +
                        "' (expected adaptive, const_1e-2, const_1e-4 or decay_0.95)");
}

double lr_schedule(LrSchedule kind, long update, long total_updates, double base) {
  if (update < 0 || total_updates <= 0 || update > total_updates) {
    throw std::invalid_argument("lr_schedule: need 0 <= update <= total_updates");
  }
  switch (kind) {
    case LrSchedule::kAdaptive:
      return base * (1.0 - static_cast<double>(update) / static_cast<double>(total_updates));
    case LrSchedule::kConst1e2: return 1e-2;
    case LrSchedule::kConst1e4: return 1e-4;
    case LrSchedule::kDecay095: return base * std::pow(0.95, static_cast<double>(update));
  }
  throw std::invalid_argument("lr_schedule: unknown kind");
}

void validate(const PpoConfig& c) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(what);
  };
  require(c.clip > 0.0 && c.clip < 1.0, "ppo: clip must lie in (0, 1)");
  require(c.gamma > 0.0 && c.gamma <= 1.0, "ppo: gamma must lie in (0, 1]");
  require(c.lambda > 0.0 && c.lambda <= 1.0, "ppo: lambda must lie in (0, 1]");
  require(c.value_coef >= 0.0 && c.entropy_coef >= 0.0, "ppo: loss coefficients must be >= 0");
  require(c.epochs >= 1 && c.minibatch >= 1 && c.rollout >= 1, "ppo: sizes must be positive");
  require(c.total_steps >= 0, "ppo: total_steps must be >= 0");
  require(c.base_lr > 0.0 && c.max_grad_norm > 0.0, "ppo: base_lr and max_grad_norm must be > 0");
  require(c.hidden >= 1, "ppo: hidden width must be >= 1");
  require(c.reward_scale > 0.0, "ppo: reward_scale must be > 0");
}

// --- ActorCritic -------------------------------------------------------------

ActorCritic::ActorCritic(int obs_dim, int action_dim, int hidden, double init_log_std,
                         Rng& rng)
    : encoder_({obs_dim, hidden, hidden}, Activation::kTanh),
      policy_head_({hidden, action_dim}, Activation::kLinear),
      value_head_({hidden, 1}, Activation::kLinear),
      log_std_(Eigen::VectorXd::Constant(action_dim, init_log_std)) {
  encoder_.init(rng);
  policy_head_.init(rng, 0.01);
  value_head_.init(rng);
}

Eigen::VectorXd ActorCritic::latent(const Eigen::VectorXd& obs) const {
  return encoder_.forward_one(obs);
}

Eigen::MatrixXd ActorCritic::latent(const Eigen::MatrixXd& obs) const {
  return encoder_.forward(obs);
}

Eigen::VectorXd ActorCritic::mean(const Eigen::VectorXd& obs) const {
  return policy_head_.forward_one(latent(obs));
}

double ActorCritic::value(const Eigen::VectorXd& obs) const {
  return value_head_.forward_one(latent(obs))[0];
}

Eigen::Index ActorCritic::parameter_count() const {
  return encoder_.parameter_count() + policy_head_.parameter_count() +
         value_head_.parameter_count() + log_std_.size();
}

Eigen::VectorXd ActorCritic::flat_params() const {
  Eigen::VectorXd flat(parameter_count());
  flat << encoder_.params(), policy_head_.params(), value_head_.params(), log_std_;
  return flat;
}

void ActorCritic::set_flat_params(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("flat parameter size mismatch");
  Eigen::Index at = 0;
  for (Net* net : {&encoder_, &policy_head_, &value_head_}) {
    net->set_params(flat.segment(at, net->parameter_count()));
    at += net->parameter_count();
  }
  log_std_ = flat.tail(log_std_.size());
}

void save_actor_critic(std::ostream& out, const ActorCritic& net) {
  out << "pvess-actor-critic 1\n";
  write_net(out, net.encoder_);
  write_net(out, net.policy_head_);
  write_net(out, net.value_head_);
  out << "log_std " << net.log_std_.size() << '\n';
  char buf[40];
  for (double v : net.log_std_) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", v);
    out << buf;
  }
}

ActorCritic load_actor_critic(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "pvess-actor-critic" || version != 1) {
    throw ValidationError("not an actor-critic checkpoint");
  }
  ActorCritic net;
  net.encoder_ = read_net(in);
  net.policy_head_ = read_net(in);
  net.value_head_ = read_net(in);
  std::size_t n = 0;
  if (!(in >> tag >> n) || tag != "log_std" ||
      n != static_cast<std::size_t>(net.policy_head_.output_width())) {
    throw ValidationError("actor-critic checkpoint: bad log_std block");
  }
  net.log_std_.resize(static_cast<Eigen::Index>(n));
  for (auto& v : net.log_std_) {
    std::string tok;
    if (!(in >> tok)) throw ValidationError("actor-critic checkpoint: truncated log_std");
    v = std::stod(tok);
  }
  if (net.encoder_.output_width() != net.policy_head_.input_width() ||
      net.encoder_.output_width() != net.value_head_.input_width()) {
    throw ValidationError("actor-critic checkpoint: head widths do not match encoder");
  }
  return net;
}

void save_actor_critic(const std::string& path, const ActorCritic& net) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw ValidationError("cannot write checkpoint " + tmp);
    save_actor_critic(f, net);
    if (!f) throw ValidationError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw ValidationError("cannot move checkpoint into place at " + path);
  }
}

ActorCritic load_actor_critic(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open checkpoint " + path);
  return load_actor_critic(f);
}

// --- losses ------------------------------------------------------------------

Advantages gae_advantages(const Eigen::VectorXd& rewards, const Eigen::VectorXd& values,
                          const std::vector<bool>& dones, double bootstrap, double gamma,
                          double lambda) {
  const Eigen::Index n = rewards.size();
  if (values.size() != n || static_cast<Eigen::Index>(dones.size()) != n) {
    throw std::invalid_argument("gae_advantages: length mismatch");
  }
  Advantages out{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  double running = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    const bool terminal = dones[static_cast<std::size_t>(t)];
    const double next_value = terminal ? 0.0 : (t + 1 < n ? values[t + 1] : bootstrap);
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + (terminal ? 0.0 : gamma * lambda * running);
    out.advantages[t] = running;
  }
  out.targets = out.advantages + values;
  return out;
}

Eigen::VectorXd normalize_advantages(const Eigen::VectorXd& adv) {
  const double mean = adv.mean();
  const double sd = std::sqrt((adv.array() - mean).square().mean());
  return (adv.array() - mean) / (sd + 1e-8);
}

double clipped_surrogate(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * advantage, clipped * advantage);
}

PpoLoss ppo_loss(const PpoBatch& batch, const ActorCritic& net, const PpoConfig& config) {
  const Eigen::Index n = batch.obs.cols();
  if (n == 0) throw std::invalid_argument("ppo_loss: empty batch");
  const Net& enc = net.encoder();
  const Net& head = net.policy_head();
  const Net& vhead = net.value_head();

  Net::Cache ce, cp, cv;
  const Eigen::MatrixXd z = enc.forward(batch.obs, &ce);
  const Eigen::MatrixXd mu = head.forward(z, &cp);
  const Eigen::MatrixXd v = vhead.forward(z, &cv);
  const Eigen::VectorXd& log_std = net.log_std();
  const Eigen::ArrayXd inv_var = (-2.0 * log_std.array()).exp();
  const double inv_n = 1.0 / static_cast<double>(n);

  PpoLoss out;
  Eigen::MatrixXd d_mu(mu.rows(), n);
  Eigen::VectorXd d_log_std = Eigen::VectorXd::Zero(log_std.size());
  Eigen::MatrixXd d_v(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::ArrayXd diff = batch.actions.col(i).array() - mu.col(i).array();
    const double log_prob = (-0.5 * diff.square() * inv_var - log_std.array()).sum() -
                            0.5 * kLog2Pi * static_cast<double>(log_std.size());
    const double ratio = std::exp(log_prob - batch.old_log_prob[i]);
    const double adv = batch.advantages[i];
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv;
    out.surrogate += std::min(unclipped, clipped);
    // d(min)/d(log_prob): only the unclipped branch depends on the parameters.
    const double g = unclipped <= clipped ? unclipped : 0.0;
    d_mu.col(i) = (-inv_n * g) * (diff * inv_var).matrix();
    d_log_std.array() += (-inv_n * g) * (diff.square() * inv_var - 1.0);

    const double err = v(0, i) - batch.targets[i];
    out.value_loss += err * err;
    d_v(0, i) = 2.0 * config.value_coef * inv_n * err;
  }
  out.surrogate *= inv_n;
  out.value_loss *= inv_n;
  out.entropy = (0.5 * (kLog2Pi + 1.0) + log_std.array()).sum();
  d_log_std.array() -= config.entropy_coef;
  out.loss = -(out.surrogate - config.value_coef * out.value_loss +
               config.entropy_coef * out.entropy);
  if (!std::isfinite(out.loss)) throw ContractViolation("ppo_loss: non-finite loss");

  Net::Vector g_enc, g_head, g_v;
  Eigen::MatrixXd dz_policy, dz_value;
  head.backward(cp, d_mu, g_head, &dz_policy);
  vhead.backward(cv, d_v, g_v, &dz_value);
  enc.backward(ce, dz_policy + dz_value, g_enc);

  out.grad.resize(net.parameter_count());
  out.grad << g_enc, g_head, g_v, d_log_std;
  return out;
}

// --- training ------------------------------------------------------------------

ActorCritic initial_actor_critic(int obs_dim, int action_dim, const PpoConfig& config,
                                 std::uint64_t seed) {
  Rng init_rng = stream(seed, 1);
  return ActorCritic(obs_dim, action_dim, config.hidden, config.init_log_std, init_rng);
}

TrainResult train(const EnvFactory& make_env, const PpoConfig& config, std::uint64_t seed) {
  validate(config);
  auto env = make_env();
  const int obs_dim = env->observation_dim();
  const int act_dim = env->action_dim();
  TrainResult result{initial_actor_critic(obs_dim, act_dim, config, seed), {}};
  if (config.total_steps == 0) return result;

  ActorCritic& net = result.net;
  Rng env_rng = stream(seed, 2);
  Rng sample_rng = stream(seed, 3);
  Rng shuffle_rng = stream(seed, 4);
  std::normal_distribution<double> normal(0.0, 1.0);

  const long total_updates = (config.total_steps + config.rollout - 1) / config.rollout;
  const int n = config.rollout;
  AdamState<double> adam(net.parameter_count(), config.base_lr);

  Eigen::MatrixXd obs_buf(obs_dim, n), act_buf(act_dim, n);
  Eigen::VectorXd rew(n), val(n), logp(n);
  std::vector<bool> done(static_cast<std::size_t>(n));
  std::vector<int> order(static_cast<std::size_t>(n));

  Eigen::VectorXd obs = env->reset(env_rng);
  double episode_return = 0.0;
  for (long update = 0; update < total_updates; ++update) {
    adam.lr = lr_schedule(config.schedule, update, total_updates, config.base_lr);
    const Eigen::VectorXd std_dev = net.log_std().array().exp();

    double finished_sum = 0.0;
    int finished = 0;
    for (int t = 0; t < n; ++t) {
      const Eigen::VectorXd z = net.encoder().forward_one(obs);
      const Eigen::VectorXd mu = net.policy_head().forward_one(z);
      Eigen::VectorXd a(act_dim);
      for (int d = 0; d < act_dim; ++d) a[d] = mu[d] + std_dev[d] * normal(sample_rng);
      obs_buf.col(t) = obs;
      act_buf.col(t) = a;
      val[t] = net.value_head().forward_one(z)[0];
      logp[t] = gaussian_logprob_and_entropy(net.log_std(), mu, a).log_prob;
      const Transition tr = env->step(a);
      rew[t] = config.reward_scale * tr.reward;
      done[static_cast<std::size_t>(t)] = tr.done;
      episode_return += tr.reward;
      if (tr.done) {
        finished_sum += episode_return;
        ++finished;
        episode_return = 0.0;
        obs = env->reset(env_rng);
      } else {
        obs = tr.observation;
      }
    }
    const double bootstrap = done.back() ? 0.0 : net.value(obs);
    Advantages adv = gae_advantages(rew, val, done, bootstrap, config.gamma, config.lambda);
    const Eigen::VectorXd norm_adv = normalize_advantages(adv.advantages);

    double epoch_loss = 0.0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      epoch_loss = 0.0;
      int batches = 0;
      for (int start = 0; start < n; start += config.minibatch) {
        const int m = std::min(config.minibatch, n - start);
        PpoBatch batch{Eigen::MatrixXd(obs_dim, m), Eigen::MatrixXd(act_dim, m),
                       Eigen::VectorXd(m), Eigen::VectorXd(m), Eigen::VectorXd(m)};
        for (int j = 0; j < m; ++j) {
          const int k = order[static_cast<std::size_t>(start + j)];
          batch.obs.col(j) = obs_buf.col(k);
          batch.actions.col(j) = act_buf.col(k);
          batch.old_log_prob[j] = logp[k];
          batch.advantages[j] = norm_adv[k];
          batch.targets[j] = adv.targets[k];
        }
        PpoLoss loss = ppo_loss(batch, net, config);
        clip_grad_norm(loss.grad, config.max_grad_norm);
        Eigen::VectorXd params = net.flat_params();
        adam_step(params, loss.grad, adam);
        net.set_flat_params(params);
        epoch_loss += loss.loss;
        ++batches;
      }
      epoch_loss /= batches;
    }
    if (!std::isfinite(epoch_loss)) throw ContractViolation("train: loss diverged");
    const double mean_reward =
        finished > 0 ? finished_sum / finished
                     : (result.curve.empty() ? 0.0 : result.curve.back().mean_reward);
    result.curve.push_back({update, mean_reward, epoch_loss, adam.lr});
  }
  return result;
}

double evaluate_policy(Environment& env,
                       const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& policy,
                       int episodes, Rng& rng) {
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Eigen::VectorXd obs = env.reset(rng);
    while (true) {
      const Transition tr = env.step(policy(obs));
      total += tr.reward;
      if (tr.done) break;
      obs = tr.observation;
    }
  }
  return total / episodes;
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
  std::ostringstream out;
  out.precision(17);
  out << "update,mean_reward,loss\n";
  for (const auto& p : curve) out << p.update << ',' << p.mean_reward << ',' << p.loss << '\n';
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw ValidationError("cannot write " + tmp);
    f << out.str();
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ValidationError("cannot rename " + tmp);
}

// --- toy task --------------------------------------------------------------------

Eigen::VectorXd TwoPriceCycleTask::observe() const {
  const bool high = ((t_ % 2) == 1) != start_high_;
  return Eigen::VectorXd::Constant(1, high ? 1.0 : -1.0);
}

Eigen::VectorXd TwoPriceCycleTask::reset(Rng&) {
  t_ = 0;
  return observe();
}

Transition TwoPriceCycleTask::step(const Eigen::VectorXd& action) {
  const bool high = observe()[0] > 0.0;
  const double price = high ? high_ : low_;
  const double sell = std::clamp(action[0], -1.0, 1.0);
  ++t_;
  return Transition{observe(), sell * (price - 0.5 * (low_ + high_)), t_ >= horizon_};
}

}  // namespace pvess
