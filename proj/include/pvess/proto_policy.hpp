#pragma once

// Prototype-based policy: per-dimension transformation networks compare the
// frozen encoder's latent with latents of four human-defined prototypical
// states; a fixed weight vector turns similarity scores into actions.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pvess/market_env.hpp"
#include "pvess/neural.hpp"
#include "pvess/ppo.hpp"

namespace pvess {

inline constexpr double kSimilarityEpsilon = 1e-5;
// Action weight of each prototype: charge, discharge, electrolyzer, fuel cell.
inline constexpr std::array<double, 4> kPrototypeWeights{1.0, -1.0, 1.0, 1.0};

struct PrototypicalState {
  std::string label;
  std::string intuitive_action;
  Eigen::Vector4d obs;  // {price, pv, soc, loh} in physical units
};

using PrototypeStates = std::array<PrototypicalState, 4>;

/// Corners of the observation box: BES-charge, BES-discharge, EL-run, FC-run.
PrototypeStates default_prototypes(const ObservationBox& box);

/// log((d + 1) / (d + eps)) with d the squared Euclidean distance.
template <typename DerivedA, typename DerivedB>
double similarity(const Eigen::MatrixBase<DerivedA>& z, const Eigen::MatrixBase<DerivedB>& p,
                  double eps = kSimilarityEpsilon) {
  const double d = (z - p).squaredNorm();
  return std::log((d + 1.0) / (d + eps));
}

inline double similarity_from_sq_distance(double d, double eps = kSimilarityEpsilon) {
  return std::log((d + 1.0) / (d + eps));
}

/// Upper bound of the similarity score, reached at distance zero.
inline double max_similarity(double eps = kSimilarityEpsilon) {
  return similarity_from_sq_distance(0.0, eps);
}

// d sim / d (squared distance)
inline double similarity_slope(double d, double eps = kSimilarityEpsilon) {
  return 1.0 / (d + 1.0) - 1.0 / (d + eps);
}

class PrototypeSet {
 public:
  PrototypeSet() = default;
  // `box` places the prototypical states in the encoder's input space.
  PrototypeSet(PrototypeStates states, const ObservationBox& box, int latent_dim, int hidden,
               Rng& rng);

  [[nodiscard]] const PrototypeStates& states() const { return states_; }
  [[nodiscard]] const Eigen::Matrix4d& state_inputs() const { return state_inputs_; }
  [[nodiscard]] const Net& transform(int k) const { return transforms_[k]; }
  [[nodiscard]] const Eigen::MatrixXd& prototypes() const { return prototypes_; }
  [[nodiscard]] double epsilon() const { return epsilon_; }
  [[nodiscard]] int latent_dim() const { return transforms_[0].input_width(); }

  /// Recomputes every cached prototype p_k = H_k(F(S_k)).
  void refresh(const Net& encoder);
  /// True when the cache matches a recomputation from the current networks.
  [[nodiscard]] bool is_fresh(const Net& encoder) const;

  [[nodiscard]] Eigen::Index parameter_count() const;
  [[nodiscard]] Eigen::VectorXd flat_params() const;
  // Leaves the prototype cache stale; call refresh() afterwards.
  void set_flat_params(const Eigen::VectorXd& flat);

  // Rebuild from serialized parts.
  static PrototypeSet from_parts(PrototypeStates states, Eigen::Matrix4d state_inputs,
                                 std::array<Net, 4> transforms, Eigen::MatrixXd prototypes,
                                 double epsilon);

  friend bool operator==(const PrototypeSet& a, const PrototypeSet& b);

 private:
  PrototypeStates states_;
  Eigen::Matrix4d state_inputs_ = Eigen::Matrix4d::Zero();  // normalised, one per column
  std::array<Net, 4> transforms_;
  Eigen::MatrixXd prototypes_;  // latent_dim x 4
  double epsilon_ = kSimilarityEpsilon;
};

struct Explanation {
  std::array<double, 4> sims{};
  std::array<double, 4> normalized{};      // sims / max_similarity
  std::array<double, 4> contributions{};   // weight * normalized
  Eigen::Vector4d levels = Eigen::Vector4d::Zero();
  Action action;
  int nearest = 0;  // index of the most similar prototype
  std::string nearest_label;
};

/// Recomposes the device action from per-prototype contributions.
Action action_from_contributions(const std::array<double, 4>& contributions,
                                 const PlantModel& plant, const ActionMapping& mapping);

/// `obs` is the normalised observation fed to the encoder.
Explanation compose_action(const Eigen::VectorXd& obs, const Net& encoder,
                           const PrototypeSet& protos, const PlantModel& plant,
                           const ActionMapping& mapping);

/// compose_action on a physical observation; checks that the prototype cache
/// is fresh for `encoder`.
Explanation explain(const Eigen::Vector4d& raw_obs, const ObservationBox& box, const Net& encoder,
                    const PrototypeSet& protos, const PlantModel& plant,
                    const ActionMapping& mapping);

/// Policy levels (charge, discharge, EL, FC) for a batch of latents.
Eigen::MatrixXd proto_levels(const Eigen::MatrixXd& latents, const PrototypeSet& protos);

// State-action pairs produced by the pretrained agent's deterministic policy.
struct Dataset {
  Eigen::MatrixXd obs;      // 4 x n, normalised
  Eigen::MatrixXd raw_obs;  // 4 x n, physical units
  Eigen::MatrixXd latents;  // latent_dim x n, encoder output
  Eigen::MatrixXd targets;  // 4 x n, black-box levels clipped to [0, 1]

  [[nodiscard]] Eigen::Index size() const { return obs.cols(); }
};

/// Rolls out the deterministic policy of `agent` in `env` until `n` states
/// have been recorded.
Dataset collect_dataset(const ActorCritic& agent, MarketEnvironment& env, int n, Rng& rng);

struct DistillConfig {
  int epochs = 40;
  int minibatch = 64;
  double lr = 1e-3;
  double holdout = 0.1;
  int hidden = 32;
  std::uint64_t seed = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

/// Mean squared error between prototype actions and black-box targets with
/// the gradient over every transformation-network parameter (through both
/// the batch latents and the prototypes).
LossAndGrad distill_loss(const PrototypeSet& protos, const Eigen::MatrixXd& latents,
                         const Eigen::MatrixXd& targets, const Net& encoder);

struct DistillResult {
  PrototypeSet protos;
  double initial_mse = 0.0;  // held-out split
  double final_mse = 0.0;
  std::vector<double> epoch_loss;
};

DistillResult distill(const ActorCritic& pretrained, const Dataset& data, PrototypeSet init,
                      const DistillConfig& config);

double mean_squared_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace pvess
