#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace pvess {

using Rng = std::mt19937_64;

struct Transition {
  Eigen::VectorXd observation;  // observation after the step
  double reward = 0.0;
  bool done = false;
};

// Episodic environment as seen by the learning code: observations are
// network-ready vectors and actions are raw policy outputs.
class Environment {
 public:
  virtual ~Environment() = default;
  [[nodiscard]] virtual int observation_dim() const = 0;
  [[nodiscard]] virtual int action_dim() const = 0;
  virtual Eigen::VectorXd reset(Rng& rng) = 0;
  virtual Transition step(const Eigen::VectorXd& action) = 0;
};

}  // namespace pvess
