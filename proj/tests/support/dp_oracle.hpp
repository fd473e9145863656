#pragma once

// Backward induction over a discretised copy of one episode, used as an
// independent optimum for policy-quality checks.

#include <functional>
#include <vector>

#include "pvess/market_env.hpp"

namespace pvess::testing {

struct DpGrid {
  int soc_levels = 21;
  int loh_levels = 21;
  int action_levels = 5;
};

struct DpResult {
  double grid_value = 0.0;      // interpolated optimal value at the start state
  double policy_reward = 0.0;   // greedy DP policy replayed in the real environment
  std::vector<Action> actions;  // the replayed actions
};

DpResult solve_dp(const MarketSeries& series, std::size_t window_start, double soc0, double loh0,
                  const EpisodeConfig& config, const PlantModel& plant, const DpGrid& grid = {});

/// Return of a policy (state -> action) replayed from the same start.
double replay(const MarketSeries& series, std::size_t window_start, double soc0, double loh0,
              const EpisodeConfig& config, const PlantModel& plant,
              const std::function<Action(const EnvState&)>& policy);

}  // namespace pvess::testing
