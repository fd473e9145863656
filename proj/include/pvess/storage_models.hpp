#pragma once

// Battery and hydrogen storage physics plus their cost models. Everything in
// here is a pure function of its arguments.
//
// Units:
//   battery SoC is a fraction of capacity, battery power is capacity per hour;
//   hydrogen device power is MJ/h, molar flow is kmol/h, and the reservoir
//   level is a pressure whose scale is fixed by R*T/V.

namespace pvess {

inline constexpr double kBoundTolerance = 1e-9;

struct BatteryParams {
  double eta_charge = 0.9;
  double eta_discharge = 0.95;
  double soc_min = 0.0;
  double soc_max = 1.0;
  double p_min = -0.25;
  double p_max = 0.25;
  double dt = 1.0;
};

struct BatteryState {
  double soc = 0.5;
};

struct BatteryCostModel {
  double capital_cost = 100.0;
  double capacity = 1.0;
  double round_trip_eff = 0.9;
  double phi = 1.5;
  double omega = 2.0;
  // Linearised form: w1*soc_now + w2*soc_prev + w3*rate + w4.
  double w1 = -36.23;
  double w2 = 34.80;
  double w3 = 2.77;
  double w4 = -2.45;
};

struct HydrogenParams {
  double eta_el = 0.725;
  double eta_fc = 0.6;
  double eta_hes = 0.05;   // self-consumption per step
  double ncv = 240.0;      // MJ/kmol
  double gas_const = 8.314;
  double temp = 313.0;     // K
  double volume = 35.0;    // Nm^3
  double loh_min = 0.0;
  double loh_max = 40.0;
  double p_el_min = 0.0;
  double p_el_max = 36.0;  // MJ/h
  double p_fc_min = 0.0;
  double p_fc_max = 18.0;  // MJ/h

  // Pressure change per kmol of net inflow.
  [[nodiscard]] double pressure_per_kmol() const { return gas_const * temp / volume; }
};

struct HydrogenState {
  double loh = 20.0;
  bool sigma_el = false;
  bool sigma_fc = false;
  double prev_p_el = 0.0;
  double prev_p_fc = 0.0;
  // Outcome of the most recent status update: start-up flags and the power
  // variation of each running device.
  bool zeta_el = false;
  bool zeta_fc = false;
  double kappa_el = 0.0;
  double kappa_fc = 0.0;
};

struct DeviceCost {
  double cc = 2000.0;  // capital cost
  double nu = 10000.0; // nameplate lifetime, hours
  double op = 0.5;     // hourly operation cost
  double st = 5.0;     // start-up cost
  double de = 0.1;     // cost per unit power variation
};

struct HesCostModel {
  DeviceCost el;
  DeviceCost fc;
};

void validate(const BatteryParams& params);
void validate(const BatteryCostModel& model);
void validate(const HydrogenParams& params);
void validate(const HesCostModel& model);

// --- battery -----------------------------------------------------------------

/// Largest admissible battery power for `power` given the current SoC and
/// the device power limits. Zero maps to zero.
double clamp_battery_power(const BatteryState& state, double power,
                           const BatteryParams& params);

/// soc' = soc + eta * power * dt with eta chosen by the sign of `power`.
/// Throws ContractViolation for non-finite power or when the result leaves
/// [soc_min, soc_max] by more than kBoundTolerance.
BatteryState battery_step(const BatteryState& state, double power,
                          const BatteryParams& params);

double discharge_rate(double soc_prev, double soc_now, double dt);

/// Degradation cost as a difference of DoD potentials; negative when charging.
double battery_cost_exact(double soc_prev, double soc_now, const BatteryCostModel& model);

double battery_cost_linear(double soc_prev, double soc_now, double rate,
                           const BatteryCostModel& model);

// --- hydrogen ----------------------------------------------------------------

/// Hydrogen produced by the electrolyzer (kmol/h) for power in MJ/h.
double electrolyzer_flow(double p_el, const HydrogenParams& params);

/// Hydrogen consumed by the fuel cells (kmol/h) for power in MJ/h.
double fuel_cell_flow(double p_fc, const HydrogenParams& params);

/// Reservoir level after self-consumption only. Self-consumption never
/// drags a level that sits at or above loh_min below it.
double self_consumed_level(double loh, const HydrogenParams& params);

HydrogenState reservoir_step(const HydrogenState& state, double f_el, double f_fc,
                             const HydrogenParams& params);

struct HesPower {
  double p_el = 0.0;
  double p_fc = 0.0;
};

/// Limits electrolyzer/fuel-cell power so that the next reservoir level stays
/// inside [loh_min, loh_max]; at most one of the inputs may be positive.
HesPower clamp_hes_power(const HydrogenState& state, double p_el, double p_fc,
                         const HydrogenParams& params);

/// Sets on/off flags, start-up indicators and power variations for this step.
HydrogenState update_device_status(const HydrogenState& state, double p_el, double p_fc);

double hes_cost(const HydrogenState& status, const HesCostModel& model);

}  // namespace pvess
