#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "pvess/environment.hpp"
#include "pvess/storage_models.hpp"

namespace pvess {

// Hourly electricity price (currency/kWh) and PV output (kW).
struct MarketSeries {
  std::vector<double> prices;
  std::vector<double> pv;

  [[nodiscard]] std::size_t size() const { return prices.size(); }
};

void validate(const MarketSeries& series);

enum class BatteryCostMode { kLinear, kExact };

// Which devices exist and which of their costs enter the reward.
struct DeviceMask {
  bool bes_enabled = true;
  bool bes_cost_enabled = true;
  bool hes_enabled = true;
  bool hes_cost_enabled = true;
};

// Device physics, costs and the unit conversions that put every power on the
// common kW grid scale.
struct PlantModel {
  BatteryParams battery;
  BatteryCostModel battery_cost;
  HydrogenParams hydrogen;
  HesCostModel hes_cost;
  BatteryCostMode cost_mode = BatteryCostMode::kLinear;
  double battery_kwh = 20.0;  // grid kW per unit of normalised battery power
  double kw_per_mj_h = 1.0 / 3.6;
};

void validate(const PlantModel& plant);

struct EpisodeConfig {
  int horizon = 24;
  double rho = 0.95;
  double soc_init_lo = 0.25;
  double soc_init_hi = 1.0;
  double loh_init_lo = 5.0;
  double loh_init_hi = 35.0;
  std::uint64_t rng_seed = 0;
  // When set, energy bought from the grid (p_sell < 0) pays the full price.
  bool asymmetric_pricing = false;
  DeviceMask devices;
};

void validate(const EpisodeConfig& config);

struct Action {
  double p_bat = 0.0;  // capacity per hour, > 0 charges
  double p_el = 0.0;   // MJ/h
  double p_fc = 0.0;   // MJ/h
};

struct EnvState {
  int t = 0;
  std::size_t window_start = 0;
  double price = 0.0;
  double pv = 0.0;
  BatteryState battery;
  HydrogenState hydrogen;

  // {price, pv, soc, loh}; on/off flags are deliberately absent.
  [[nodiscard]] Eigen::Vector4d observation() const {
    return {price, pv, battery.soc, hydrogen.loh};
  }
};

struct StepResult {
  EnvState next;
  Action applied;  // action after sanitisation and clamping
  double reward = 0.0;
  double p_sell = 0.0;  // kW
  double cost_bat = 0.0;
  double cost_hes = 0.0;
  bool done = false;
};

EnvState reset(const MarketSeries& series, const EpisodeConfig& config, Rng& rng);

/// Deterministic start state at a given window; used by oracles and replays.
EnvState make_state(const MarketSeries& series, std::size_t window_start, double soc,
                    double loh);

/// Keeps the larger of electrolyzer and fuel-cell power (ties keep the
/// electrolyzer) and zeroes the other.
Action enforce_exclusivity(const Action& action);

/// p_sell = pv + p_fc - p_bat - p_el, all in kW.
double sold_power(double pv, double p_bat_kw, double p_el_kw, double p_fc_kw);

double step_reward(double price, double p_sell, double cost_bat, double cost_hes, double rho,
                   bool asymmetric_pricing);

StepResult step(const EnvState& state, const Action& raw_action, const MarketSeries& series,
                const EpisodeConfig& config, const PlantModel& plant);

MarketSeries load_series(const std::filesystem::path& path);
void save_series(const MarketSeries& series, const std::filesystem::path& path);

struct SynthProfile {
  double pv_peak = 10.0;       // kW at solar noon on a clear day
  double pv_width = 2.5;       // hours, std-dev of the daylight bell
  double pv_noise = 0.03;      // relative to pv_peak
  double cloud_min = 0.6;      // daily clear-sky factor drawn from [cloud_min, 1]
  double price_base = 0.08;
  double price_morning = 0.22; // peak height above base
  double price_evening = 0.34;
  double price_noise = 0.015;
};

MarketSeries synth_series(int days, std::uint64_t seed, const SynthProfile& profile = {});

// Box used to normalise observations for the networks and to place the
// human-defined prototypical states at its corners.
struct ObservationBox {
  Eigen::Vector4d lo = Eigen::Vector4d::Zero();
  Eigen::Vector4d hi = Eigen::Vector4d::Ones();

  [[nodiscard]] Eigen::Vector4d normalize(const Eigen::Vector4d& obs) const {
    return ((obs - lo).array() / (hi - lo).array()).matrix();
  }
  [[nodiscard]] bool contains(const Eigen::Vector4d& obs) const {
    return (obs.array() >= lo.array() - kBoundTolerance).all() &&
           (obs.array() <= hi.array() + kBoundTolerance).all();
  }
};

ObservationBox make_observation_box(const MarketSeries& series, const PlantModel& plant);

// Maps a 4-dim policy output (charge, discharge, electrolyzer, fuel cell
// levels) onto device powers. Levels are clipped to [0, 1]; hydrogen levels
// at or below `hes_deadband` leave the device off.
struct ActionMapping {
  double hes_deadband = 0.05;
};

inline constexpr int kPolicyDims = 4;

Eigen::Vector4d clip_levels(const Eigen::Vector4d& levels);
Action levels_to_action(const Eigen::Vector4d& levels, const PlantModel& plant,
                        const ActionMapping& mapping);

// Environment adapter used for rollouts: normalised observations in, policy
// levels in, reward out.
class MarketEnvironment final : public Environment {
 public:
  MarketEnvironment(const MarketSeries* series, EpisodeConfig config, PlantModel plant,
                    ObservationBox box, ActionMapping mapping = {});

  [[nodiscard]] int observation_dim() const override { return 4; }
  [[nodiscard]] int action_dim() const override { return kPolicyDims; }
  Eigen::VectorXd reset(Rng& rng) override;
  Transition step(const Eigen::VectorXd& levels) override;

  [[nodiscard]] const EnvState& state() const { return state_; }
  [[nodiscard]] const StepResult& last() const { return last_; }
  void set_state(const EnvState& state) { state_ = state; }
  [[nodiscard]] Eigen::VectorXd observe() const { return box_.normalize(state_.observation()); }

  [[nodiscard]] const EpisodeConfig& config() const { return config_; }
  [[nodiscard]] const PlantModel& plant() const { return plant_; }
  [[nodiscard]] const ObservationBox& box() const { return box_; }
  [[nodiscard]] const ActionMapping& mapping() const { return mapping_; }
  [[nodiscard]] const MarketSeries& series() const { return *series_; }

 private:
  const MarketSeries* series_;
  EpisodeConfig config_;
  PlantModel plant_;
  ObservationBox box_;
  ActionMapping mapping_;
  EnvState state_;
  StepResult last_;
};

}  // namespace pvess
