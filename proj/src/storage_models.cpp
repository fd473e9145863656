#include "pvess/storage_models.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pvess/error.hpp"

namespace pvess {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

bool in_unit_interval(double x) { return x > 0.0 && x <= 1.0; }

double snap_into(double value, double lo, double hi, const char* what) {
  if (value < lo - kBoundTolerance || value > hi + kBoundTolerance) {
    throw ContractViolation(std::string(what) + " left its bounds: " + std::to_string(value) +
                            " not in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return std::clamp(value, lo, hi);
}

void validate_device_cost(const DeviceCost& c, const char* name) {
  require(c.nu > 0.0, std::string(name) + ": lifetime nu must be positive");
  require(c.cc >= 0.0 && c.op >= 0.0 && c.st >= 0.0 && c.de >= 0.0,
          std::string(name) + ": cost coefficients must be nonnegative");
}

}  // namespace

void validate(const BatteryParams& p) {
  require(0.0 <= p.soc_min && p.soc_min < p.soc_max && p.soc_max <= 1.0,
          "battery: need 0 <= soc_min < soc_max <= 1");
  require(p.p_min < 0.0 && 0.0 < p.p_max, "battery: need p_min < 0 < p_max");
  require(in_unit_interval(p.eta_charge) && in_unit_interval(p.eta_discharge),
          "battery: efficiencies must lie in (0, 1]");
  require(p.dt > 0.0, "battery: dt must be positive");
}

void validate(const BatteryCostModel& m) {
  require(m.capacity > 0.0, "battery cost: capacity must be positive");
  require(in_unit_interval(m.round_trip_eff), "battery cost: round_trip_eff must lie in (0, 1]");
  require(m.phi > 0.0 && m.omega > 0.0, "battery cost: phi and omega must be positive");
}

void validate(const HydrogenParams& p) {
  require(in_unit_interval(p.eta_el) && in_unit_interval(p.eta_fc) && in_unit_interval(p.eta_hes),
          "hydrogen: efficiencies must lie in (0, 1]");
  require(p.volume > 0.0 && p.ncv > 0.0 && p.gas_const > 0.0 && p.temp > 0.0,
          "hydrogen: volume, ncv, gas constant and temperature must be positive");
  require(p.loh_min < p.loh_max, "hydrogen: need loh_min < loh_max");
  require(0.0 <= p.p_el_min && p.p_el_min <= p.p_el_max,
          "hydrogen: need 0 <= p_el_min <= p_el_max");
  require(0.0 <= p.p_fc_min && p.p_fc_min <= p.p_fc_max,
          "hydrogen: need 0 <= p_fc_min <= p_fc_max");
}

void validate(const HesCostModel& m) {
  validate_device_cost(m.el, "electrolyzer cost");
  validate_device_cost(m.fc, "fuel cell cost");
}

double clamp_battery_power(const BatteryState& state, double power, const BatteryParams& params) {
  if (power > 0.0) {
    const double headroom = (params.soc_max - state.soc) / (params.eta_charge * params.dt);
    return std::max(0.0, std::min({power, headroom, params.p_max}));
  }
  if (power < 0.0) {
    const double floor_room = (params.soc_min - state.soc) / (params.eta_discharge * params.dt);
    return std::min(0.0, std::max({power, floor_room, params.p_min}));
  }
  return 0.0;
}

BatteryState battery_step(const BatteryState& state, double power, const BatteryParams& params) {
  if (!std::isfinite(power)) throw ContractViolation("battery_step: non-finite power");
  const double eta = power > 0.0 ? params.eta_charge : params.eta_discharge;
  const double next = state.soc + eta * power * params.dt;
  return BatteryState{snap_into(next, params.soc_min, params.soc_max, "battery SoC")};
}

double discharge_rate(double soc_prev, double soc_now, double dt) {
  return (soc_prev - soc_now) / dt;
}

double battery_cost_exact(double soc_prev, double soc_now, const BatteryCostModel& m) {
  const double scale =
      m.capital_cost / (m.capacity * m.round_trip_eff * m.round_trip_eff * m.phi);
  return scale * (std::pow(1.0 - soc_now, m.omega) - std::pow(1.0 - soc_prev, m.omega));
}

double battery_cost_linear(double soc_prev, double soc_now, double rate,
                           const BatteryCostModel& m) {
  return m.w1 * soc_now + m.w2 * soc_prev + m.w3 * rate + m.w4;
}

double electrolyzer_flow(double p_el, const HydrogenParams& params) {
  if (!(p_el >= 0.0)) throw ContractViolation("electrolyzer_flow: power must be nonnegative");
  return params.eta_el * p_el / params.ncv;
}

double fuel_cell_flow(double p_fc, const HydrogenParams& params) {
  if (!(p_fc >= 0.0)) throw ContractViolation("fuel_cell_flow: power must be nonnegative");
  return p_fc / (params.eta_fc * params.ncv);
}

double self_consumed_level(double loh, const HydrogenParams& params) {
  const double decayed = (1.0 - params.eta_hes) * loh;
  return std::max(decayed, std::min(loh, params.loh_min));
}

HydrogenState reservoir_step(const HydrogenState& state, double f_el, double f_fc,
                             const HydrogenParams& params) {
  if (!std::isfinite(f_el) || !std::isfinite(f_fc)) {
    throw ContractViolation("reservoir_step: non-finite flow");
  }
  HydrogenState next = state;
  const double level =
      self_consumed_level(state.loh, params) + params.pressure_per_kmol() * (f_el - f_fc);
  next.loh = snap_into(level, params.loh_min, params.loh_max, "hydrogen level");
  return next;
}

HesPower clamp_hes_power(const HydrogenState& state, double p_el, double p_fc,
                         const HydrogenParams& params) {
  HesPower out;
  const double decayed = self_consumed_level(state.loh, params);
  const double k = params.pressure_per_kmol();
  if (p_el > 0.0) {
    const double room = std::max(0.0, params.loh_max - decayed);
    const double cap = room / k * params.ncv / params.eta_el;
    double p = std::min(p_el, params.p_el_max);
    if (p < params.p_el_min) p = params.p_el_min;
    out.p_el = p <= cap ? p : (cap >= params.p_el_min ? cap : 0.0);
  }
  if (p_fc > 0.0) {
    const double available = std::max(0.0, decayed - params.loh_min);
    const double cap = available / k * params.eta_fc * params.ncv;
    double p = std::min(p_fc, params.p_fc_max);
    if (p < params.p_fc_min) p = params.p_fc_min;
    out.p_fc = p <= cap ? p : (cap >= params.p_fc_min ? cap : 0.0);
  }
  return out;
}

HydrogenState update_device_status(const HydrogenState& state, double p_el, double p_fc) {
  HydrogenState next = state;
  next.sigma_el = p_el > 0.0;
  next.sigma_fc = p_fc > 0.0;
  next.zeta_el = next.sigma_el && !state.sigma_el;
  next.zeta_fc = next.sigma_fc && !state.sigma_fc;
  next.kappa_el = next.sigma_el ? std::abs(p_el - state.prev_p_el) : 0.0;
  next.kappa_fc = next.sigma_fc ? std::abs(p_fc - state.prev_p_fc) : 0.0;
  next.prev_p_el = p_el;
  next.prev_p_fc = p_fc;
  return next;
}

double hes_cost(const HydrogenState& s, const HesCostModel& m) {
  auto device = [](const DeviceCost& c, bool on, bool started, double kappa) {
    return (c.cc / c.nu + c.op) * (on ? 1.0 : 0.0) + c.st * (started ? 1.0 : 0.0) + c.de * kappa;
  };
  return device(m.el, s.sigma_el, s.zeta_el, s.kappa_el) +
         device(m.fc, s.sigma_fc, s.zeta_fc, s.kappa_fc);
}

}  // namespace pvess
