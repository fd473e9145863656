#include <random>

#include <Eigen/QR>
#include <gtest/gtest.h>

#include "pvess/baselines.hpp"
#include "pvess/harness.hpp"
#include "support/finite_diff.hpp"

using namespace pvess;
using pvess::testing::max_relative_error;
using pvess::testing::numeric_gradient;

namespace {

Eigen::MatrixXd uniform(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return Eigen::MatrixXd::NullaryExpr(r, c, [&] { return u(rng); });
}

Dataset small_dataset(ActorCritic& agent, int n, std::uint64_t seed) {
  static const MarketSeries series = synth_series(20, 3);
  const PlantModel plant;
  Rng rng(seed);
  agent = ActorCritic(4, 4, 16, -0.69, rng);
  MarketEnvironment env(&series, EpisodeConfig{}, plant, make_observation_box(series, plant));
  return collect_dataset(agent, env, n, rng);
}

}  // namespace

TEST(KMeans, DistinctPointsAreTheirOwnCentroids) {
  Eigen::MatrixXd pts(2, 4);
  pts << 0, 1, 5, 9,
         0, 3, 2, 7;
  const KMeansResult r = kmeans_cluster(pts, 4, 1);
  EXPECT_EQ(r.inertia.back(), 0.0);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.centroids.col(r.assignments[i]), pts.col(i));
}

TEST(KMeans, SeparatedBlobsGiveBlobMeans) {
  Eigen::MatrixXd pts(2, 4);
  pts << 0.0, 0.2, 10.0, 10.4,
         0.0, 0.2, 10.0, 10.0;
  const KMeansResult r = kmeans_cluster(pts, 2, 3);
  EXPECT_EQ(r.assignments[0], r.assignments[1]);
  EXPECT_EQ(r.assignments[2], r.assignments[3]);
  EXPECT_NE(r.assignments[0], r.assignments[2]);
  EXPECT_TRUE(r.centroids.col(r.assignments[0]).isApprox(Eigen::Vector2d(0.1, 0.1), 1e-15));
  EXPECT_TRUE(r.centroids.col(r.assignments[2]).isApprox(Eigen::Vector2d(10.2, 10.0), 1e-15));
}

TEST(KMeans, DeterministicAndInertiaNonIncreasing) {
  Rng rng(4);
  const Eigen::MatrixXd pts = uniform(5, 400, rng);
  const KMeansResult a = kmeans_cluster(pts, 4, 9), b = kmeans_cluster(pts, 4, 9);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignments, b.assignments);
  for (std::size_t i = 1; i < a.inertia.size(); ++i) EXPECT_LE(a.inertia[i], a.inertia[i - 1]);
  std::vector<int> count(4, 0);
  for (int c : a.assignments) ++count[c];
  for (int c : count) EXPECT_GT(c, 0);
  // Every point sits with its nearest centroid.
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    Eigen::Index best;
    (a.centroids.colwise() - pts.col(i)).colwise().squaredNorm().minCoeff(&best);
    EXPECT_EQ(best, a.assignments[i]);
  }
}

TEST(KMeans, DuplicatePointsKeepClustersNonEmpty) {
  Eigen::MatrixXd pts = Eigen::MatrixXd::Zero(2, 6);
  pts.col(5) << 1.0, 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const KMeansResult r = kmeans_cluster(pts, 2, seed);
    EXPECT_NE(r.assignments[0], r.assignments[5]);
  }
}

TEST(KMeans, RejectsTooFewPoints) {
  EXPECT_THROW(kmeans_cluster(Eigen::MatrixXd::Zero(2, 3), 4, 1), ValidationError);
}

TEST(Mapping, NearestStateWithLowestIndexOnTies) {
  Eigen::MatrixXd latents(1, 7);
  latents << 9, 8, 1, 7, 6, 3, 5;
  EXPECT_EQ(map_centroid_to_state(Eigen::VectorXd::Constant(1, 7.0), latents), 3);
  EXPECT_EQ(map_centroid_to_state(Eigen::VectorXd::Constant(1, 2.0), latents), 2);  // ties 2 and 5
  EXPECT_EQ(map_centroid_to_state(Eigen::VectorXd::Constant(1, -40.0), Eigen::MatrixXd::Ones(1, 1)),
            0);
}

TEST(LastLayer, RecoversKnownWeights) {
  Rng rng(5);
  const Eigen::MatrixXd f = uniform(4, 500, rng);
  const Eigen::MatrixXd w = uniform(3, 4, rng) * 2.0 - Eigen::MatrixXd::Ones(3, 4);
  EXPECT_LT((fit_last_layer(f, w * f) - w).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LastLayer, ResidualMatchesPseudoInverse) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd f = uniform(4, 300, rng);
    const Eigen::MatrixXd t = uniform(4, 300, rng);
    const Eigen::MatrixXd w = fit_last_layer(f, t);
    // Oracle: solve f^T w^T = t^T by complete orthogonal decomposition.
    const Eigen::MatrixXd w_star =
        f.transpose().completeOrthogonalDecomposition().solve(t.transpose()).transpose();
    EXPECT_NEAR((t - w * f).norm(), (t - w_star * f).norm(), 1e-8);
  }
}

TEST(LastLayer, DegenerateInputs) {
  EXPECT_TRUE(fit_last_layer(Eigen::MatrixXd::Ones(2, 10), Eigen::MatrixXd::Zero(3, 10)).isZero(0.0));
  // A single constant feature interpolates a constant target.
  const Eigen::MatrixXd w =
      fit_last_layer(Eigen::MatrixXd::Constant(1, 8, 0.5), Eigen::MatrixXd::Constant(1, 8, 2.0));
  EXPECT_NEAR(w(0, 0), 4.0, 1e-5);
  EXPECT_THROW(fit_last_layer(Eigen::MatrixXd(2, 0), Eigen::MatrixXd(1, 0)), ValidationError);
}

TEST(KMeansProto, UsesDatasetStates) {
  ActorCritic agent;
  const Dataset d = small_dataset(agent, 600, 7);
  const KMeansProto k = fit_kmeans_proto(d, 3);
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(k.mapped_states.col(j), d.raw_obs.col(k.mapped_index[j]));
    EXPECT_EQ(k.prototypes.col(j), d.latents.col(k.mapped_index[j]));
  }
  const Eigen::MatrixXd lv = k.levels(d.latents);
  EXPECT_EQ(lv.rows(), 4);
  EXPECT_TRUE(lv.allFinite());
}

TEST(Variant, LossGradientMatchesFiniteDifferences) {
  Rng rng(8);
  double worst = 0.0;
  for (int draw = 0; draw < 10; ++draw) {
    LearnedProtoVariant v = init_variant(6, 5, rng);
    const Eigen::MatrixXd z = uniform(6, 5, rng);
    const Eigen::MatrixXd t = uniform(4, 5, rng);
    const LossAndGrad lg = variant_loss(v, z, t);
    LearnedProtoVariant probe = v;
    auto f = [&](const Eigen::VectorXd& p) {
      probe.set_flat_params(p);
      return variant_loss(probe, z, t).loss;
    };
    worst = std::max(worst, max_relative_error(lg.grad, numeric_gradient(f, v.flat_params())));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Variant, ZeroEpochsAndMapping) {
  ActorCritic agent;
  const Dataset d = small_dataset(agent, 300, 9);
  Rng rng(1);
  const LearnedProtoVariant init = init_variant(agent.latent_dim(), 8, rng);
  DistillConfig c;
  c.epochs = 0;
  const VariantResult r0 = train_variant(agent, d, init, c);
  EXPECT_EQ(r0.variant.transform, init.transform);
  EXPECT_EQ(r0.variant.prototypes, init.prototypes);

  c.epochs = 3;
  const ActorCritic before = agent;
  const VariantResult r = train_variant(agent, d, init, c);
  EXPECT_EQ(agent, before);
  for (int j = 0; j < 4; ++j) {
    ASSERT_LT(r.variant.mapped_index[j], d.size());
    EXPECT_EQ(r.variant.mapped_states.col(j), d.raw_obs.col(r.variant.mapped_index[j]));
  }
}
