#include "pvess/proto_policy.hpp"

#include <algorithm>
#include <numeric>

namespace pvess {

PrototypeStates default_prototypes(const ObservationBox& box) {
  const Eigen::Vector4d& lo = box.lo;
  const Eigen::Vector4d& hi = box.hi;
  const Eigen::Vector4d mid = 0.5 * (lo + hi);
  PrototypeStates s;
  s[0] = {"BES-charge", "charge the battery from cheap PV surplus", {lo[0], hi[1], lo[2], mid[3]}};
  s[1] = {"BES-discharge", "discharge the battery into an expensive market",
          {hi[0], lo[1], hi[2], lo[3]}};
  s[2] = {"EL-run", "run the electrolyzer on cheap PV surplus", {lo[0], hi[1], mid[2], lo[3]}};
  s[3] = {"FC-run", "run the fuel cells into an expensive market", {hi[0], lo[1], mid[2], hi[3]}};
  return s;
}

PrototypeSet::PrototypeSet(PrototypeStates states, const ObservationBox& box, int latent_dim,
                           int hidden, Rng& rng)
    : states_(std::move(states)) {
  if (latent_dim <= 0 || hidden <= 0) throw ValidationError("prototype nets need positive widths");
  for (int k = 0; k < 4; ++k) {
    if (!box.contains(states_[k].obs)) {
      throw ValidationError("prototypical state '" + states_[k].label +
                            "' lies outside the observation box");
    }
    state_inputs_.col(k) = box.normalize(states_[k].obs);
    transforms_[k] = Net({latent_dim, hidden, latent_dim}, Activation::kLinear);
    transforms_[k].init(rng);
  }
  prototypes_ = Eigen::MatrixXd::Zero(latent_dim, 4);
}

PrototypeSet PrototypeSet::from_parts(PrototypeStates states, Eigen::Matrix4d state_inputs,
                                      std::array<Net, 4> transforms, Eigen::MatrixXd prototypes,
                                      double epsilon) {
  PrototypeSet p;
  p.states_ = std::move(states);
  p.state_inputs_ = state_inputs;
  p.transforms_ = std::move(transforms);
  p.prototypes_ = std::move(prototypes);
  p.epsilon_ = epsilon;
  const int latent = p.transforms_[0].input_width();
  for (const auto& h : p.transforms_) {
    if (h.input_width() != latent || h.output_width() != latent) {
      throw ValidationError("transformation nets must map the latent onto itself");
    }
  }
  if (p.prototypes_.rows() != latent || p.prototypes_.cols() != 4) {
    throw ValidationError("prototype matrix has the wrong shape");
  }
  if (!(epsilon > 0.0)) throw ValidationError("similarity epsilon must be positive");
  return p;
}

void PrototypeSet::refresh(const Net& encoder) {
  // Same single-column path as compose_action so S_k maps exactly onto p_k.
  for (int k = 0; k < 4; ++k) {
    const Eigen::VectorXd z = encoder.forward_one(state_inputs_.col(k));
    prototypes_.col(k) = transforms_[k].forward_one(z);
  }
}

bool PrototypeSet::is_fresh(const Net& encoder) const {
  PrototypeSet copy = *this;
  copy.refresh(encoder);
  return copy.prototypes_ == prototypes_;
}

Eigen::Index PrototypeSet::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& h : transforms_) n += h.parameter_count();
  return n;
}

Eigen::VectorXd PrototypeSet::flat_params() const {
  Eigen::VectorXd out(parameter_count());
  Eigen::Index at = 0;
  for (const auto& h : transforms_) {
    out.segment(at, h.parameter_count()) = h.params();
    at += h.parameter_count();
  }
  return out;
}

void PrototypeSet::set_flat_params(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("prototype parameter size");
  Eigen::Index at = 0;
  for (auto& h : transforms_) {
    h.set_params(flat.segment(at, h.parameter_count()));
    at += h.parameter_count();
  }
}

bool operator==(const PrototypeSet& a, const PrototypeSet& b) {
  for (int k = 0; k < 4; ++k) {
    if (a.states_[k].label != b.states_[k].label || a.states_[k].obs != b.states_[k].obs ||
        !(a.transforms_[k] == b.transforms_[k])) {
      return false;
    }
  }
  return a.state_inputs_ == b.state_inputs_ && a.prototypes_ == b.prototypes_ &&
         a.epsilon_ == b.epsilon_;
}

Action action_from_contributions(const std::array<double, 4>& c, const PlantModel& plant,
                                 const ActionMapping& mapping) {
  // Contributions are already in [-1, 1] with the sign carried by the weight,
  // so the battery term is their plain sum.
  Action a;
  const double net = c[0] + c[1];
  a.p_bat = net >= 0.0 ? net * plant.battery.p_max : -net * plant.battery.p_min;
  a.p_el = c[2] > mapping.hes_deadband ? c[2] * plant.hydrogen.p_el_max : 0.0;
  a.p_fc = c[3] > mapping.hes_deadband ? c[3] * plant.hydrogen.p_fc_max : 0.0;
  return a;
}

Explanation compose_action(const Eigen::VectorXd& obs, const Net& encoder,
                           const PrototypeSet& protos, const PlantModel& plant,
                           const ActionMapping& mapping) {
  const Eigen::VectorXd z = encoder.forward_one(obs);
  const double s_max = max_similarity(protos.epsilon());
  Explanation e;
  for (int k = 0; k < 4; ++k) {
    const Eigen::VectorXd zk = protos.transform(k).forward_one(z);
    e.sims[k] = similarity(zk, protos.prototypes().col(k), protos.epsilon());
    e.normalized[k] = e.sims[k] / s_max;
    e.contributions[k] = kPrototypeWeights[k] * e.normalized[k];
    e.levels[k] = e.normalized[k];
  }
  e.nearest = static_cast<int>(std::max_element(e.sims.begin(), e.sims.end()) - e.sims.begin());
  e.nearest_label = protos.states()[e.nearest].label;
  e.action = action_from_contributions(e.contributions, plant, mapping);
  return e;
}

Explanation explain(const Eigen::Vector4d& raw_obs, const ObservationBox& box, const Net& encoder,
                    const PrototypeSet& protos, const PlantModel& plant,
                    const ActionMapping& mapping) {
  if (!raw_obs.allFinite()) throw ValidationError("observation must be finite");
  if (!protos.is_fresh(encoder)) {
    throw ContractViolation("prototype cache is stale for this encoder");
  }
  return compose_action(box.normalize(raw_obs), encoder, protos, plant, mapping);
}

Eigen::MatrixXd proto_levels(const Eigen::MatrixXd& latents, const PrototypeSet& protos) {
  const double s_max = max_similarity(protos.epsilon());
  Eigen::MatrixXd out(4, latents.cols());
  for (int k = 0; k < 4; ++k) {
    const Eigen::MatrixXd zk = protos.transform(k).forward(latents);
    const Eigen::VectorXd p = protos.prototypes().col(k);
    for (Eigen::Index i = 0; i < latents.cols(); ++i) {
      out(k, i) = similarity_from_sq_distance((zk.col(i) - p).squaredNorm(), protos.epsilon()) /
                  s_max;
    }
  }
  return out;
}

Dataset collect_dataset(const ActorCritic& agent, MarketEnvironment& env, int n, Rng& rng) {
  if (n <= 0) throw ValidationError("dataset size must be positive");
  Dataset d;
  d.obs.resize(4, n);
  d.raw_obs.resize(4, n);
  d.targets.resize(4, n);
  Eigen::VectorXd obs = env.reset(rng);
  for (int i = 0; i < n; ++i) {
    d.obs.col(i) = obs;
    d.raw_obs.col(i) = env.state().observation();
    const Eigen::VectorXd mean = agent.mean(obs);
    d.targets.col(i) = clip_levels(mean.head<4>());
    const Transition tr = env.step(mean);
    obs = tr.done ? env.reset(rng) : tr.observation;
  }
  d.latents = agent.encoder().forward(d.obs);
  return d;
}

double mean_squared_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("mean_squared_error: shape mismatch");
  }
  if (a.size() == 0) throw ValidationError("mean_squared_error: empty input");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

LossAndGrad distill_loss(const PrototypeSet& protos, const Eigen::MatrixXd& latents,
                         const Eigen::MatrixXd& targets, const Net& encoder) {
  const Eigen::Index n = latents.cols();
  if (n == 0 || targets.cols() != n || targets.rows() != 4) {
    throw ValidationError("distill_loss: batch shape mismatch");
  }
  const double eps = protos.epsilon();
  const double s_max = max_similarity(eps);
  const double scale = 1.0 / static_cast<double>(4 * n);
  const Eigen::MatrixXd anchor = encoder.forward(protos.state_inputs());

  LossAndGrad out;
  out.grad = Eigen::VectorXd::Zero(protos.parameter_count());
  Eigen::Index at = 0;
  for (int k = 0; k < 4; ++k) {
    const Net& h = protos.transform(k);
    Net::Cache batch_cache, proto_cache;
    const Eigen::MatrixXd zk = h.forward(latents, &batch_cache);
    const Eigen::MatrixXd pk = h.forward(anchor.col(k), &proto_cache);
    const Eigen::MatrixXd diff = zk.colwise() - pk.col(0);
    Eigen::MatrixXd dz(diff.rows(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = diff.col(i).squaredNorm();
      const double r = similarity_from_sq_distance(d, eps) / s_max - targets(k, i);
      out.loss += scale * r * r;
      const double dd = 2.0 * scale * r * similarity_slope(d, eps) / s_max;
      dz.col(i) = 2.0 * dd * diff.col(i);
    }
    const Eigen::MatrixXd dp = -dz.rowwise().sum();
    Eigen::VectorXd g = Eigen::VectorXd::Zero(h.parameter_count());
    h.backward(batch_cache, dz, g);
    h.backward(proto_cache, dp, g);
    out.grad.segment(at, h.parameter_count()) = g;
    at += h.parameter_count();
  }
  return out;
}

namespace {

std::vector<Eigen::Index> shuffled(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx,
                       std::size_t from, std::size_t to) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(to - from));
  for (std::size_t j = from; j < to; ++j) out.col(static_cast<Eigen::Index>(j - from)) = m.col(idx[j]);
  return out;
}

}  // namespace

DistillResult distill(const ActorCritic& pretrained, const Dataset& data, PrototypeSet init,
                      const DistillConfig& config) {
  if (data.size() == 0) throw ValidationError("distill: empty dataset");
  if (config.epochs < 0 || config.minibatch <= 0 || !(config.lr > 0.0) ||
      !(config.holdout >= 0.0 && config.holdout < 1.0)) {
    throw ValidationError("distill: invalid training configuration");
  }
  const Net& encoder = pretrained.encoder();
  if (init.latent_dim() != encoder.output_width()) {
    throw ValidationError("distill: transformation nets do not match the encoder latent width");
  }
  const Net::Vector encoder_before = encoder.params();
  const PrototypeStates states_before = init.states();
  const Eigen::Matrix4d inputs_before = init.state_inputs();

  Rng rng(config.seed);
  const Eigen::MatrixXd latents = encoder.forward(data.obs);
  const auto order = shuffled(data.size(), rng);
  const auto n = static_cast<std::size_t>(data.size());
  std::size_t n_hold = static_cast<std::size_t>(config.holdout * static_cast<double>(n));
  if (n_hold >= n) n_hold = 0;
  const std::size_t n_train = n - n_hold;
  const Eigen::MatrixXd hold_z = n_hold ? gather(latents, order, n_train, n) : gather(latents, order, 0, n);
  const Eigen::MatrixXd hold_t =
      n_hold ? gather(data.targets, order, n_train, n) : gather(data.targets, order, 0, n);
  std::vector<Eigen::Index> train_idx(order.begin(), order.begin() + static_cast<long>(n_train));

  DistillResult result;
  init.refresh(encoder);
  result.protos = std::move(init);
  PrototypeSet& protos = result.protos;
  result.initial_mse = mean_squared_error(proto_levels(hold_z, protos), hold_t);

  AdamState<double> adam(protos.parameter_count(), config.lr);
  Eigen::VectorXd params = protos.flat_params();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t from = 0; from < n_train; from += static_cast<std::size_t>(config.minibatch)) {
      const std::size_t to = std::min(n_train, from + static_cast<std::size_t>(config.minibatch));
      const LossAndGrad lg = distill_loss(protos, gather(latents, train_idx, from, to),
                                          gather(data.targets, train_idx, from, to), encoder);
      adam_step(params, lg.grad, adam);
      protos.set_flat_params(params);
      protos.refresh(encoder);
      total += lg.loss;
      ++batches;
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  result.final_mse = mean_squared_error(proto_levels(hold_z, protos), hold_t);

  const PrototypeStates& states_after = protos.states();
  bool intact = encoder.params() == encoder_before && protos.state_inputs() == inputs_before;
  for (int k = 0; k < 4; ++k) {
    intact = intact && states_after[k].obs == states_before[k].obs &&
             states_after[k].label == states_before[k].label;
  }
  if (!intact) throw ContractViolation("distill: frozen-parameter mutation detected");
  return result;
}

}  // namespace pvess
