#include "pvess/baselines.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include <Eigen/Cholesky>

namespace pvess {

namespace {

// Column index of the nearest centre; ties keep the lowest index.
int nearest_column(const Eigen::MatrixXd& centres, const Eigen::VectorXd& x, double* dist) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centres.cols(); ++c) {
    const double d = (centres.col(c) - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

}  // namespace

KMeansResult kmeans_cluster(const Eigen::MatrixXd& points, int k, std::uint64_t seed,
                            int max_iter) {
  const Eigen::Index n = points.cols();
  if (k <= 0) throw ValidationError("kmeans: k must be positive");
  if (n < k) throw ValidationError("kmeans: fewer points than clusters");
  if (max_iter <= 0) throw ValidationError("kmeans: max_iter must be positive");
  if (!points.allFinite()) throw ValidationError("kmeans: non-finite input");

  Rng rng(seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  // Partial Fisher-Yates: the first k entries are a uniform sample.
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }

  KMeansResult r;
  r.centroids.resize(points.rows(), k);
  for (int c = 0; c < k; ++c) r.centroids.col(c) = points.col(idx[static_cast<std::size_t>(c)]);
  r.assignments.assign(static_cast<std::size_t>(n), -1);

  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto s = static_cast<std::size_t>(i);
      const int a = nearest_column(r.centroids, points.col(i), &dist[s]);
      changed = changed || a != r.assignments[s];
      r.assignments[s] = a;
      inertia += dist[s];
    }
    r.inertia.push_back(inertia);
    r.iterations = iter + 1;
    if (!changed) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(points.rows(), k);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = r.assignments[static_cast<std::size_t>(i)];
      sums.col(a) += points.col(i);
      ++counts[static_cast<std::size_t>(a)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        r.centroids.col(c) = sums.col(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      const auto far = static_cast<Eigen::Index>(
          std::max_element(dist.begin(), dist.end()) - dist.begin());
      r.centroids.col(c) = points.col(far);
      dist[static_cast<std::size_t>(far)] = 0.0;
      r.assignments[static_cast<std::size_t>(far)] = c;
    }
  }
  return r;
}

Eigen::Index map_centroid_to_state(const Eigen::VectorXd& centroid,
                                   const Eigen::MatrixXd& latents) {
  if (latents.cols() == 0) throw ValidationError("map_centroid_to_state: empty dataset");
  if (latents.rows() != centroid.size()) {
    throw ValidationError("map_centroid_to_state: width mismatch");
  }
  return nearest_column(latents, centroid, nullptr);
}

Eigen::MatrixXd fit_last_layer(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets,
                               double ridge) {
  if (features.cols() == 0) throw ValidationError("fit_last_layer: empty dataset");
  if (features.cols() != targets.cols()) {
    throw ValidationError("fit_last_layer: feature and target counts differ");
  }
  if (!features.allFinite() || !targets.allFinite() || !(ridge >= 0.0)) {
    throw ValidationError("fit_last_layer: non-finite input");
  }
  const Eigen::Index f = features.rows();
  Eigen::MatrixXd gram = features * features.transpose();
  gram.diagonal().array() += ridge;
  const Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) {
    throw ValidationError("fit_last_layer: design matrix is singular even with the ridge term");
  }
  // W gram = T F^T, solved through gram^T = gram.
  const Eigen::MatrixXd w = llt.solve(features * targets.transpose()).transpose();
  if (!w.allFinite() || w.cols() != f) {
    throw ValidationError("fit_last_layer: solution is not finite");
  }
  return w;
}

Eigen::MatrixXd KMeansProto::features(const Eigen::MatrixXd& latents) const {
  const double s_max = max_similarity(epsilon);
  Eigen::MatrixXd out(4, latents.cols());
  for (Eigen::Index i = 0; i < latents.cols(); ++i) {
    for (int k = 0; k < 4; ++k) {
      out(k, i) =
          similarity_from_sq_distance((latents.col(i) - prototypes.col(k)).squaredNorm(), epsilon) /
          s_max;
    }
  }
  return out;
}

Eigen::MatrixXd KMeansProto::levels(const Eigen::MatrixXd& latents) const {
  return weights * features(latents);
}

KMeansProto fit_kmeans_proto(const Dataset& data, std::uint64_t seed, int max_iter) {
  if (data.size() == 0) throw ValidationError("kmeans baseline: empty dataset");
  KMeansProto m;
  const KMeansResult km = kmeans_cluster(data.latents, 4, seed, max_iter);
  m.centroids = km.centroids;
  m.prototypes.resize(data.latents.rows(), 4);
  for (int k = 0; k < 4; ++k) {
    m.mapped_index[k] = map_centroid_to_state(km.centroids.col(k), data.latents);
    m.mapped_states.col(k) = data.raw_obs.col(m.mapped_index[k]);
    m.prototypes.col(k) = data.latents.col(m.mapped_index[k]);
  }
  m.weights = fit_last_layer(m.features(data.latents), data.targets);
  return m;
}

Eigen::Index LearnedProtoVariant::parameter_count() const {
  return transform.parameter_count() + prototypes.size();
}

Eigen::VectorXd LearnedProtoVariant::flat_params() const {
  Eigen::VectorXd out(parameter_count());
  out.head(transform.parameter_count()) = transform.params();
  out.tail(prototypes.size()) = prototypes.reshaped();
  return out;
}

void LearnedProtoVariant::set_flat_params(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("variant parameter size");
  transform.set_params(flat.head(transform.parameter_count()));
  prototypes.reshaped() = flat.tail(prototypes.size());
}

Eigen::MatrixXd LearnedProtoVariant::levels(const Eigen::MatrixXd& latents) const {
  const double s_max = max_similarity(epsilon);
  const Eigen::MatrixXd h = transform.forward(latents);
  Eigen::MatrixXd out(4, latents.cols());
  for (Eigen::Index i = 0; i < latents.cols(); ++i) {
    for (int k = 0; k < 4; ++k) {
      out(k, i) =
          similarity_from_sq_distance((h.col(i) - prototypes.col(k)).squaredNorm(), epsilon) /
          s_max;
    }
  }
  return out;
}

LearnedProtoVariant init_variant(int latent_dim, int hidden, Rng& rng) {
  if (latent_dim <= 0 || hidden <= 0) throw ValidationError("variant needs positive widths");
  LearnedProtoVariant v;
  v.transform = Net({latent_dim, hidden, latent_dim}, Activation::kLinear);
  v.transform.init(rng);
  std::normal_distribution<double> normal(0.0, 0.1);
  v.prototypes.resize(latent_dim, 4);
  for (Eigen::Index j = 0; j < v.prototypes.cols(); ++j) {
    for (Eigen::Index i = 0; i < v.prototypes.rows(); ++i) v.prototypes(i, j) = normal(rng);
  }
  return v;
}

LossAndGrad variant_loss(const LearnedProtoVariant& v, const Eigen::MatrixXd& latents,
                         const Eigen::MatrixXd& targets) {
  const Eigen::Index n = latents.cols();
  if (n == 0 || targets.cols() != n || targets.rows() != 4) {
    throw ValidationError("variant_loss: batch shape mismatch");
  }
  const double s_max = max_similarity(v.epsilon);
  const double scale = 1.0 / static_cast<double>(4 * n);
  Net::Cache cache;
  const Eigen::MatrixXd h = v.transform.forward(latents, &cache);
  Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(h.rows(), n);
  Eigen::MatrixXd dp = Eigen::MatrixXd::Zero(h.rows(), 4);
  LossAndGrad out;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < 4; ++k) {
      const Eigen::VectorXd diff = h.col(i) - v.prototypes.col(k);
      const double d = diff.squaredNorm();
      const double r = similarity_from_sq_distance(d, v.epsilon) / s_max - targets(k, i);
      out.loss += scale * r * r;
      const double dd = 2.0 * scale * r * similarity_slope(d, v.epsilon) / s_max;
      dh.col(i) += 2.0 * dd * diff;
      dp.col(k) -= 2.0 * dd * diff;
    }
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(v.transform.parameter_count());
  v.transform.backward(cache, dh, g);
  out.grad.resize(v.parameter_count());
  out.grad.head(g.size()) = g;
  out.grad.tail(dp.size()) = dp.reshaped();
  return out;
}

VariantResult train_variant(const ActorCritic& pretrained, const Dataset& data,
                            LearnedProtoVariant init, const DistillConfig& config) {
  if (data.size() == 0) throw ValidationError("train_variant: empty dataset");
  if (config.epochs < 0 || config.minibatch <= 0 || !(config.lr > 0.0) ||
      !(config.holdout >= 0.0 && config.holdout < 1.0)) {
    throw ValidationError("train_variant: invalid training configuration");
  }
  const Net& encoder = pretrained.encoder();
  if (init.transform.input_width() != encoder.output_width() ||
      init.prototypes.rows() != encoder.output_width() || init.prototypes.cols() != 4) {
    throw ValidationError("train_variant: shapes do not match the encoder latent width");
  }
  const Net::Vector encoder_before = encoder.params();

  Rng rng(config.seed);
  const Eigen::MatrixXd latents = encoder.forward(data.obs);
  const auto n = static_cast<std::size_t>(data.size());
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_hold = static_cast<std::size_t>(config.holdout * static_cast<double>(n));
  if (n_hold >= n) n_hold = 0;
  const std::size_t n_train = n - n_hold;
  auto gather = [&](const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx,
                    std::size_t from, std::size_t to) {
    Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(to - from));
    for (std::size_t j = from; j < to; ++j) {
      out.col(static_cast<Eigen::Index>(j - from)) = m.col(idx[j]);
    }
    return out;
  };
  const std::size_t hold_from = n_hold ? n_train : 0;
  const Eigen::MatrixXd hold_z = gather(latents, order, hold_from, n);
  const Eigen::MatrixXd hold_t = gather(data.targets, order, hold_from, n);
  std::vector<Eigen::Index> train_idx(order.begin(), order.begin() + static_cast<long>(n_train));

  VariantResult result;
  result.variant = std::move(init);
  LearnedProtoVariant& v = result.variant;
  result.initial_mse = mean_squared_error(v.levels(hold_z), hold_t);

  AdamState<double> adam(v.parameter_count(), config.lr);
  Eigen::VectorXd params = v.flat_params();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t from = 0; from < n_train; from += static_cast<std::size_t>(config.minibatch)) {
      const std::size_t to = std::min(n_train, from + static_cast<std::size_t>(config.minibatch));
      const LossAndGrad lg = variant_loss(v, gather(latents, train_idx, from, to),
                                          gather(data.targets, train_idx, from, to));
      adam_step(params, lg.grad, adam);
      v.set_flat_params(params);
      total += lg.loss;
      ++batches;
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  result.final_mse = mean_squared_error(v.levels(hold_z), hold_t);

  const Eigen::MatrixXd h = v.transform.forward(latents);
  for (int k = 0; k < 4; ++k) {
    v.mapped_index[k] = map_centroid_to_state(v.prototypes.col(k), h);
    v.mapped_states.col(k) = data.raw_obs.col(v.mapped_index[k]);
  }
  if (!(encoder.params() == encoder_before)) {
    throw ContractViolation("train_variant: frozen-parameter mutation detected");
  }
  return result;
}

}  // namespace pvess
