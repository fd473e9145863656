#pragma once

// Comparison policies: a single-transform network with learned prototypes,
// and K-Means prototypes in latent space with a least-squares output layer.

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "pvess/proto_policy.hpp"

namespace pvess {

struct KMeansResult {
  Eigen::MatrixXd centroids;  // dim x k
  std::vector<int> assignments;
  std::vector<double> inertia;  // after each assignment pass
  int iterations = 0;
};

/// Lloyd's algorithm on the columns of `points` from `k` distinct random
/// points. An empty cluster is reseeded at the point farthest from its
/// centroid.
KMeansResult kmeans_cluster(const Eigen::MatrixXd& points, int k, std::uint64_t seed,
                            int max_iter = 100);

/// Index of the column of `latents` nearest to `centroid`; ties go to the
/// lowest index.
Eigen::Index map_centroid_to_state(const Eigen::VectorXd& centroid,
                                   const Eigen::MatrixXd& latents);

/// Ridge least squares: returns W (targets.rows() x features.rows())
/// minimising |targets - W features|^2 + ridge |W|^2.
Eigen::MatrixXd fit_last_layer(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets,
                               double ridge = 1e-6);

struct KMeansProto {
  Eigen::MatrixXd centroids;    // latent x 4
  std::array<Eigen::Index, 4> mapped_index{};
  Eigen::Matrix4d mapped_states = Eigen::Matrix4d::Zero();  // physical units
  Eigen::MatrixXd prototypes;   // latents of the mapped states
  Eigen::Matrix4d weights = Eigen::Matrix4d::Zero();
  double epsilon = kSimilarityEpsilon;

  /// Normalised similarity of each latent to each prototype (4 x n).
  [[nodiscard]] Eigen::MatrixXd features(const Eigen::MatrixXd& latents) const;
  [[nodiscard]] Eigen::MatrixXd levels(const Eigen::MatrixXd& latents) const;
};

KMeansProto fit_kmeans_proto(const Dataset& data, std::uint64_t seed, int max_iter = 100);

struct LearnedProtoVariant {
  Net transform;              // shared by all four dimensions
  Eigen::MatrixXd prototypes; // latent x 4, trained
  std::array<Eigen::Index, 4> mapped_index{};
  Eigen::Matrix4d mapped_states = Eigen::Matrix4d::Zero();
  double epsilon = kSimilarityEpsilon;

  [[nodiscard]] Eigen::Index parameter_count() const;
  // Layout: transform | prototypes (column-major).
  [[nodiscard]] Eigen::VectorXd flat_params() const;
  void set_flat_params(const Eigen::VectorXd& flat);
  [[nodiscard]] Eigen::MatrixXd levels(const Eigen::MatrixXd& latents) const;

  friend bool operator==(const LearnedProtoVariant& a, const LearnedProtoVariant& b) {
    return a.transform == b.transform && a.prototypes == b.prototypes &&
           a.mapped_index == b.mapped_index && a.epsilon == b.epsilon;
  }
};

/// Prototypes drawn from N(0, 0.1^2).
LearnedProtoVariant init_variant(int latent_dim, int hidden, Rng& rng);

LossAndGrad variant_loss(const LearnedProtoVariant& variant, const Eigen::MatrixXd& latents,
                         const Eigen::MatrixXd& targets);

struct VariantResult {
  LearnedProtoVariant variant;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  std::vector<double> epoch_loss;
};

VariantResult train_variant(const ActorCritic& pretrained, const Dataset& data,
                            LearnedProtoVariant init, const DistillConfig& config);

}  // namespace pvess
