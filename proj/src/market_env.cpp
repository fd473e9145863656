#include "pvess/market_env.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>

#include "pvess/error.hpp"

namespace pvess {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

double market_value(const std::vector<double>& values, std::size_t index) {
  return index < values.size() ? values[index] : values.back();
}

}  // namespace

void validate(const MarketSeries& s) {
  require(s.prices.size() == s.pv.size(), "series: price and pv lengths differ");
  require(!s.prices.empty(), "series: empty");
  for (std::size_t i = 0; i < s.size(); ++i) {
    require(std::isfinite(s.prices[i]) && s.prices[i] >= 0.0,
            "series: negative or non-finite price at hour " + std::to_string(i));
    require(std::isfinite(s.pv[i]) && s.pv[i] >= 0.0,
            "series: negative or non-finite pv at hour " + std::to_string(i));
  }
}

void validate(const PlantModel& plant) {
  validate(plant.battery);
  validate(plant.battery_cost);
  validate(plant.hydrogen);
  validate(plant.hes_cost);
  require(plant.battery_kwh > 0.0 && plant.kw_per_mj_h > 0.0,
          "plant: unit conversions must be positive");
}

void validate(const EpisodeConfig& c) {
  require(c.horizon >= 1, "episode: horizon must be >= 1");
  require(c.rho > 0.0 && c.rho <= 1.0, "episode: rho must lie in (0, 1]");
  require(c.soc_init_lo <= c.soc_init_hi, "episode: empty SoC initial range");
  require(c.loh_init_lo <= c.loh_init_hi, "episode: empty LoH initial range");
}

EnvState make_state(const MarketSeries& series, std::size_t window_start, double soc,
                    double loh) {
  if (window_start >= series.size()) throw ValidationError("window start beyond series end");
  EnvState s;
  s.window_start = window_start;
  s.price = series.prices[window_start];
  s.pv = series.pv[window_start];
  s.battery.soc = soc;
  s.hydrogen.loh = loh;
  return s;
}

EnvState reset(const MarketSeries& series, const EpisodeConfig& config, Rng& rng) {
  const auto horizon = static_cast<std::size_t>(config.horizon);
  if (series.size() < horizon) {
    throw ValidationError("series has " + std::to_string(series.size()) +
                          " hours, shorter than the episode horizon " +
                          std::to_string(config.horizon));
  }
  const std::size_t windows = (series.size() - horizon) / 24 + 1;
  std::uniform_int_distribution<std::size_t> pick_window(0, windows - 1);
  std::uniform_real_distribution<double> soc_dist(config.soc_init_lo, config.soc_init_hi);
  std::uniform_real_distribution<double> loh_dist(config.loh_init_lo, config.loh_init_hi);
  const std::size_t start = 24 * pick_window(rng);
  const double soc = soc_dist(rng);
  const double loh = loh_dist(rng);
  return make_state(series, start, soc, loh);
}

Action enforce_exclusivity(const Action& action) {
  Action out = action;
  if (out.p_el > 0.0 && out.p_fc > 0.0) {
    if (out.p_fc > out.p_el) {
      out.p_el = 0.0;
    } else {
      out.p_fc = 0.0;
    }
  }
  return out;
}

double sold_power(double pv, double p_bat_kw, double p_el_kw, double p_fc_kw) {
  return pv + p_fc_kw - p_bat_kw - p_el_kw;
}

double step_reward(double price, double p_sell, double cost_bat, double cost_hes, double rho,
                   bool asymmetric_pricing) {
  const double unit_price = (asymmetric_pricing && p_sell < 0.0) ? price : rho * price;
  return unit_price * p_sell - cost_bat - cost_hes;
}

StepResult step(const EnvState& state, const Action& raw_action, const MarketSeries& series,
                const EpisodeConfig& config, const PlantModel& plant) {
  if (state.t >= config.horizon) throw ContractViolation("step called on a finished episode");
  if (!std::isfinite(raw_action.p_bat) || !std::isfinite(raw_action.p_el) ||
      !std::isfinite(raw_action.p_fc)) {
    throw ContractViolation("step: non-finite action");
  }
  const DeviceMask& dev = config.devices;

  Action a = raw_action;
  a.p_el = std::max(0.0, a.p_el);
  a.p_fc = std::max(0.0, a.p_fc);
  if (!dev.bes_enabled) a.p_bat = 0.0;
  if (!dev.hes_enabled) a.p_el = a.p_fc = 0.0;
  a = enforce_exclusivity(a);
  a.p_bat = clamp_battery_power(state.battery, a.p_bat, plant.battery);
  const HesPower hes = clamp_hes_power(state.hydrogen, a.p_el, a.p_fc, plant.hydrogen);
  a.p_el = hes.p_el;
  a.p_fc = hes.p_fc;

  StepResult out;
  out.applied = a;
  EnvState& next = out.next;
  next = state;

  if (dev.bes_enabled) {
    next.battery = battery_step(state.battery, a.p_bat, plant.battery);
  }
  if (dev.hes_enabled) {
    const double f_el = electrolyzer_flow(a.p_el, plant.hydrogen);
    const double f_fc = fuel_cell_flow(a.p_fc, plant.hydrogen);
    next.hydrogen = reservoir_step(state.hydrogen, f_el, f_fc, plant.hydrogen);
    next.hydrogen = update_device_status(next.hydrogen, a.p_el, a.p_fc);
  }

  if (dev.bes_enabled && dev.bes_cost_enabled) {
    const double soc_prev = state.battery.soc;
    const double soc_now = next.battery.soc;
    if (plant.cost_mode == BatteryCostMode::kLinear) {
      const double rate = discharge_rate(soc_prev, soc_now, plant.battery.dt);
      out.cost_bat = battery_cost_linear(soc_prev, soc_now, rate, plant.battery_cost);
    } else {
      out.cost_bat = battery_cost_exact(soc_prev, soc_now, plant.battery_cost);
    }
  }
  if (dev.hes_enabled && dev.hes_cost_enabled) {
    out.cost_hes = hes_cost(next.hydrogen, plant.hes_cost);
  }

  out.p_sell = sold_power(state.pv, a.p_bat * plant.battery_kwh, a.p_el * plant.kw_per_mj_h,
                          a.p_fc * plant.kw_per_mj_h);
  out.reward = step_reward(state.price, out.p_sell, out.cost_bat, out.cost_hes, config.rho,
                           config.asymmetric_pricing);

  next.t = state.t + 1;
  const std::size_t hour = state.window_start + static_cast<std::size_t>(next.t);
  next.price = market_value(series.prices, hour);
  next.pv = market_value(series.pv, hour);
  out.done = next.t >= config.horizon;
  return out;
}

MarketSeries load_series(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open series file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_csv(line);
  int col_hour = -1, col_price = -1, col_pv = -1;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    if (header[i] == "hour") col_hour = i;
    if (header[i] == "price") col_price = i;
    if (header[i] == "pv") col_pv = i;
  }
  std::string missing;
  if (col_hour < 0) missing += " hour";
  if (col_price < 0) missing += " price";
  if (col_pv < 0) missing += " pv";
  if (!missing.empty()) {
    throw ValidationError(path.string() + ": missing column(s):" + missing);
  }

  MarketSeries series;
  long long expected_hour = 0;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line);
    const auto where = path.string() + " row " + std::to_string(row);
    if (fields.size() != header.size()) {
      throw ValidationError(where + ": expected " + std::to_string(header.size()) +
                            " fields, found " + std::to_string(fields.size()));
    }
    long long hour = 0;
    double price = 0.0, pv = 0.0;
    if (!parse_number(fields[col_hour], hour)) throw ValidationError(where + ": bad hour");
    if (!parse_number(fields[col_price], price)) throw ValidationError(where + ": bad price");
    if (!parse_number(fields[col_pv], pv)) throw ValidationError(where + ": bad pv");
    if (hour != expected_hour) {
      throw ValidationError(where + ": non-hourly gap, expected hour " +
                            std::to_string(expected_hour) + " but found " + std::to_string(hour));
    }
    if (!(price >= 0.0) || !std::isfinite(price)) {
      throw ValidationError(where + ": negative price " + std::string(fields[col_price]));
    }
    if (!(pv >= 0.0) || !std::isfinite(pv)) {
      throw ValidationError(where + ": negative pv " + std::string(fields[col_pv]));
    }
    series.prices.push_back(price);
    series.pv.push_back(pv);
    ++expected_hour;
  }
  if (series.size() == 0) throw ValidationError(path.string() + ": no data rows");
  return series;
}

void save_series(const MarketSeries& series, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "hour,price,pv\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    out << i << ',' << series.prices[i] << ',' << series.pv[i] << '\n';
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw ValidationError("cannot write " + tmp);
    f << out.str();
    if (!f) throw ValidationError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

MarketSeries synth_series(int days, std::uint64_t seed, const SynthProfile& p) {
  if (days < 1) throw ValidationError("synth_series: days must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> cloud(p.cloud_min, 1.0);
  auto bump = [](double h, double centre, double width) {
    const double x = (h - centre) / width;
    return std::exp(-0.5 * x * x);
  };

  MarketSeries s;
  s.prices.reserve(static_cast<std::size_t>(days) * 24);
  s.pv.reserve(static_cast<std::size_t>(days) * 24);
  for (int d = 0; d < days; ++d) {
    const double clear_sky = cloud(rng);
    const double level = 0.85 + 0.3 * cloud(rng);  // day-to-day price level
    for (int h = 0; h < 24; ++h) {
      double pv = 0.0;
      if (h >= 6 && h <= 18) {
        pv = p.pv_peak * clear_sky * bump(h, 12.0, p.pv_width) +
             p.pv_noise * p.pv_peak * noise(rng);
      }
      const double price = level * (p.price_base + p.price_morning * bump(h, 8.0, 1.5) +
                                    p.price_evening * bump(h, 19.0, 2.0)) +
                           p.price_noise * noise(rng);
      s.pv.push_back(std::max(0.0, pv));
      s.prices.push_back(std::max(0.0, price));
    }
  }
  return s;
}

ObservationBox make_observation_box(const MarketSeries& series, const PlantModel& plant) {
  ObservationBox box;
  const double price_max = *std::max_element(series.prices.begin(), series.prices.end());
  const double pv_max = *std::max_element(series.pv.begin(), series.pv.end());
  box.lo = {0.0, 0.0, plant.battery.soc_min, plant.hydrogen.loh_min};
  box.hi = {price_max > 0.0 ? price_max : 1.0, pv_max > 0.0 ? pv_max : 1.0,
            plant.battery.soc_max, plant.hydrogen.loh_max};
  return box;
}

Eigen::Vector4d clip_levels(const Eigen::Vector4d& levels) {
  return levels.cwiseMax(0.0).cwiseMin(1.0);
}

Action levels_to_action(const Eigen::Vector4d& levels, const PlantModel& plant,
                        const ActionMapping& mapping) {
  const Eigen::Vector4d u = clip_levels(levels);
  Action a;
  const double net = u[0] - u[1];
  a.p_bat = net >= 0.0 ? net * plant.battery.p_max : -net * plant.battery.p_min;
  a.p_el = u[2] > mapping.hes_deadband ? u[2] * plant.hydrogen.p_el_max : 0.0;
  a.p_fc = u[3] > mapping.hes_deadband ? u[3] * plant.hydrogen.p_fc_max : 0.0;
  return a;
}

MarketEnvironment::MarketEnvironment(const MarketSeries* series, EpisodeConfig config,
                                     PlantModel plant, ObservationBox box,
                                     ActionMapping mapping)
    : series_(series),
      config_(config),
      plant_(plant),
      box_(box),
      mapping_(mapping) {
  validate(*series_);
  validate(config_);
  validate(plant_);
}

Eigen::VectorXd MarketEnvironment::reset(Rng& rng) {
  state_ = pvess::reset(*series_, config_, rng);
  return observe();
}

Transition MarketEnvironment::step(const Eigen::VectorXd& levels) {
  const Eigen::Vector4d u = levels.head<4>();
  last_ = pvess::step(state_, levels_to_action(u, plant_, mapping_), *series_, config_, plant_);
  state_ = last_.next;
  return Transition{observe(), last_.reward, last_.done};
}

}  // namespace pvess
