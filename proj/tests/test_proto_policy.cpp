#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pvess/harness.hpp"
#include "pvess/proto_policy.hpp"
#include "support/finite_diff.hpp"

using namespace pvess;
using pvess::testing::max_relative_error;
using pvess::testing::numeric_gradient;

namespace {

struct Fixture {
  MarketSeries series = synth_series(20, 3);
  PlantModel plant;
  ObservationBox box = make_observation_box(series, plant);
  ActorCritic agent;
  PrototypeSet protos;

  explicit Fixture(std::uint64_t seed, int hidden = 16) {
    Rng rng(seed);
    agent = ActorCritic(4, 4, hidden, -0.69, rng);
    protos = PrototypeSet(default_prototypes(box), box, hidden, 8, rng);
    protos.refresh(agent.encoder());
  }

  Dataset dataset(int n, std::uint64_t seed) const {
    MarketEnvironment env(&series, EpisodeConfig{}, plant, box);
    Rng rng(seed);
    return collect_dataset(agent, env, n, rng);
  }
};

}  // namespace

TEST(Prototypes, BoxCorners) {
  ObservationBox box;
  box.lo = {0.05, 0.0, 0.0, 0.0};
  box.hi = {0.5, 9.0, 1.0, 40.0};
  const PrototypeStates s = default_prototypes(box);
  EXPECT_EQ(s[0].label, "BES-charge");
  EXPECT_EQ(s[0].obs, Eigen::Vector4d(0.05, 9.0, 0.0, 20.0));
  EXPECT_EQ(s[1].label, "BES-discharge");
  EXPECT_EQ(s[1].obs, Eigen::Vector4d(0.5, 0.0, 1.0, 0.0));
  EXPECT_EQ(s[2].obs, Eigen::Vector4d(0.05, 9.0, 0.5, 0.0));
  EXPECT_EQ(s[3].obs, Eigen::Vector4d(0.5, 0.0, 0.5, 40.0));
  for (const auto& st : s) EXPECT_TRUE(box.contains(st.obs));
}

TEST(Prototypes, OutOfBoxStateRejected) {
  ObservationBox box;
  PrototypeStates s = default_prototypes(box);
  s[2].obs[0] = 2.0;
  Rng rng(1);
  EXPECT_THROW(PrototypeSet(s, box, 8, 4, rng), ValidationError);
}

TEST(Similarity, ClosedForms) {
  const Eigen::Vector3d z(0.3, -1.0, 2.0);
  EXPECT_NEAR(similarity(z, z), 11.512925465, 1e-6);
  EXPECT_EQ(similarity(z, z), max_similarity());
  EXPECT_NEAR(similarity(z, Eigen::Vector3d(z + Eigen::Vector3d(1, 0, 0))), std::log(2.0 / 1.00001),
              1e-12);
  EXPECT_NEAR(similarity_from_sq_distance(1.0), 0.69314, 1e-5);
  EXPECT_LT(similarity_from_sq_distance(1e12), 1e-11);
  EXPECT_GT(similarity_from_sq_distance(1e12), 0.0);
}

TEST(Similarity, MonotoneDecreasing) {
  double prev = max_similarity();
  for (int i = 1; i <= 1000; ++i) {
    const double s = similarity_from_sq_distance(1e-3 * i * i);
    EXPECT_LT(s, prev);
    EXPECT_GT(s, 0.0);
    prev = s;
  }
}

TEST(Compose, PrototypicalStateGivesMaximalScore) {
  Fixture f(2);
  for (int k = 0; k < 4; ++k) {
    const Explanation e =
        explain(f.protos.states()[k].obs, f.box, f.agent.encoder(), f.protos, f.plant, {});
    EXPECT_EQ(e.sims[k], max_similarity());
    EXPECT_EQ(e.nearest, k);
  }
  const Explanation e2 =
      explain(f.protos.states()[1].obs, f.box, f.agent.encoder(), f.protos, f.plant, {});
  EXPECT_EQ(e2.nearest_label, "BES-discharge");
}

TEST(Compose, ContributionsRecomposeAction) {
  Fixture f(3);
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector4d obs = f.box.lo + (f.box.hi - f.box.lo).cwiseProduct(
                                               Eigen::Vector4d(u(rng), u(rng), u(rng), u(rng)));
    const Explanation e = explain(obs, f.box, f.agent.encoder(), f.protos, f.plant, {});
    const Action again = action_from_contributions(e.contributions, f.plant, {});
    EXPECT_EQ(again.p_bat, e.action.p_bat);
    EXPECT_EQ(again.p_el, e.action.p_el);
    EXPECT_EQ(again.p_fc, e.action.p_fc);
    // Same action through the level mapping used by every other policy.
    const Action via_levels = levels_to_action(e.levels, f.plant, {});
    EXPECT_EQ(via_levels.p_bat, e.action.p_bat);
    EXPECT_EQ(via_levels.p_el, e.action.p_el);
    EXPECT_LE(std::abs(e.contributions[0] + e.contributions[1]), 1.0);
  }
}

TEST(Compose, ScalingRule) {
  const PlantModel plant;
  // Equal charge and discharge similarity cancel.
  EXPECT_EQ(action_from_contributions({0.4, -0.4, 0.0, 0.0}, plant, {}).p_bat, 0.0);
  // Full charge similarity and none for discharge: full charging power.
  EXPECT_EQ(action_from_contributions({1.0, -0.0, 0.0, 0.0}, plant, {}).p_bat, plant.battery.p_max);
  EXPECT_EQ(action_from_contributions({0.0, -1.0, 0.0, 0.0}, plant, {}).p_bat, plant.battery.p_min);
}

TEST(Compose, StaleCacheRejected) {
  Fixture f(5);
  PrototypeSet stale = f.protos;
  Eigen::VectorXd p = stale.flat_params();
  p[0] += 0.5;
  stale.set_flat_params(p);
  EXPECT_FALSE(stale.is_fresh(f.agent.encoder()));
  EXPECT_THROW(explain(f.protos.states()[0].obs, f.box, f.agent.encoder(), stale, f.plant, {}),
               ContractViolation);
}

TEST(Compose, BatchLevelsMatchSingleDecisions) {
  Fixture f(6);
  const Dataset d = f.dataset(50, 1);
  const Eigen::MatrixXd levels = proto_levels(d.latents, f.protos);
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const Explanation e = compose_action(d.obs.col(i), f.agent.encoder(), f.protos, f.plant, {});
    EXPECT_LT((levels.col(i) - e.levels).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DistillLoss, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int draw = 0; draw < 10; ++draw) {
    Fixture f(100 + draw, 8);
    const Eigen::MatrixXd obs = Eigen::MatrixXd::NullaryExpr(4, 6, [&] { return u(rng); });
    const Eigen::MatrixXd latents = f.agent.encoder().forward(obs);
    const Eigen::MatrixXd targets = Eigen::MatrixXd::NullaryExpr(4, 6, [&] { return u(rng); });
    const LossAndGrad lg = distill_loss(f.protos, latents, targets, f.agent.encoder());
    PrototypeSet probe = f.protos;
    auto loss = [&](const Eigen::VectorXd& p) {
      probe.set_flat_params(p);
      probe.refresh(f.agent.encoder());
      return mean_squared_error(proto_levels(latents, probe), targets);
    };
    EXPECT_NEAR(lg.loss, loss(f.protos.flat_params()), 1e-14);
    worst = std::max(worst, max_relative_error(lg.grad, numeric_gradient(loss, f.protos.flat_params())));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Distill, ZeroEpochsReturnsInitialisation) {
  Fixture f(8);
  const Dataset d = f.dataset(200, 2);
  DistillConfig c;
  c.epochs = 0;
  const DistillResult r = distill(f.agent, d, f.protos, c);
  EXPECT_EQ(r.protos, f.protos);
  EXPECT_EQ(r.initial_mse, r.final_mse);
}

TEST(Distill, FreezesEncoderAndStatesAndReducesLoss) {
  Fixture f(9);
  const ActorCritic before = f.agent;
  const Dataset d = f.dataset(2000, 3);
  DistillConfig c;
  c.epochs = 5;
  const DistillResult r = distill(f.agent, d, f.protos, c);
  EXPECT_EQ(f.agent, before);
  EXPECT_EQ(r.protos.state_inputs(), f.protos.state_inputs());
  for (int k = 0; k < 4; ++k) EXPECT_EQ(r.protos.states()[k].obs, f.protos.states()[k].obs);
  EXPECT_TRUE(r.protos.is_fresh(f.agent.encoder()));
  EXPECT_LT(r.final_mse, r.initial_mse);
  EXPECT_EQ(kPrototypeWeights, (std::array<double, 4>{1.0, -1.0, 1.0, 1.0}));
  // The maximal score at each prototypical state survives training.
  for (int k = 0; k < 4; ++k) {
    const Explanation e =
        explain(r.protos.states()[k].obs, f.box, f.agent.encoder(), r.protos, f.plant, {});
    EXPECT_EQ(e.sims[k], max_similarity());
  }
}

TEST(Distill, RejectsEmptyDataset) {
  Fixture f(10);
  EXPECT_THROW(distill(f.agent, Dataset{}, f.protos, DistillConfig{}), ValidationError);
}

TEST(Dataset, TargetsAreClippedDeterministicMeans) {
  Fixture f(11);
  const Dataset d = f.dataset(100, 4);
  ASSERT_EQ(d.size(), 100);
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const Eigen::Vector4d mean = f.agent.mean(d.obs.col(i)).head<4>();
    EXPECT_EQ(d.targets.col(i), clip_levels(mean));
    EXPECT_EQ(d.obs.col(i), f.box.normalize(d.raw_obs.col(i)));
  }
}

TEST(Explanation, JsonRoundTrip) {
  Fixture f(12);
  const Eigen::Vector4d obs = 0.5 * (f.box.lo + f.box.hi);
  const Explanation e = explain(obs, f.box, f.agent.encoder(), f.protos, f.plant, {});
  const json j = explanation_to_json(e, 7, obs);
  for (const char* key : {"t", "obs", "sims", "contributions", "action", "nearest_prototype"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  const ExplanationRecord r = explanation_from_json(json::parse(j.dump()));
  EXPECT_EQ(r.t, 7);
  EXPECT_EQ(r.obs, obs);
  EXPECT_EQ(r.sims, e.sims);
  EXPECT_EQ(r.contributions, e.contributions);
  EXPECT_EQ(r.action, (std::array<double, 3>{e.action.p_bat, e.action.p_el, e.action.p_fc}));
  EXPECT_EQ(r.nearest_prototype, e.nearest_label);
  EXPECT_EQ(explanation_from_json(explanation_to_json(e, 7, obs)), r);
}
