#include "pvess/harness.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <openssl/evp.h>

namespace pvess {

// --- JSON mappings ---------------------------------------------------------

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BatteryParams, eta_charge, eta_discharge, soc_min,
                                                soc_max, p_min, p_max, dt)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BatteryCostModel, capital_cost, capacity,
                                                round_trip_eff, phi, omega, w1, w2, w3, w4)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HydrogenParams, eta_el, eta_fc, eta_hes, ncv,
                                                gas_const, temp, volume, loh_min, loh_max,
                                                p_el_min, p_el_max, p_fc_min, p_fc_max)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DeviceCost, cc, nu, op, st, de)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HesCostModel, el, fc)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DeviceMask, bes_enabled, bes_cost_enabled,
                                                hes_enabled, hes_cost_enabled)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EpisodeConfig, horizon, rho, soc_init_lo,
                                                soc_init_hi, loh_init_lo, loh_init_hi, rng_seed,
                                                asymmetric_pricing, devices)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ActionMapping, hes_deadband)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthProfile, pv_peak, pv_width, pv_noise,
                                                cloud_min, price_base, price_morning,
                                                price_evening, price_noise)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DistillConfig, epochs, minibatch, lr, holdout,
                                                hidden, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, csv, synth_days, synth_seed, profile)

NLOHMANN_JSON_SERIALIZE_ENUM(BatteryCostMode, {{BatteryCostMode::kLinear, "linear"},
                                               {BatteryCostMode::kExact, "exact"}})

void to_json(json& j, const LrSchedule& s) { j = to_string(s); }
void from_json(const json& j, LrSchedule& s) { s = parse_lr_schedule(j.get<std::string>()); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PpoConfig, clip, gamma, lambda, value_coef,
                                                entropy_coef, epochs, minibatch, rollout,
                                                total_steps, schedule, base_lr, max_grad_norm,
                                                init_log_std, hidden, reward_scale)

void to_json(json& j, const PlantModel& p) {
  j = json{{"battery", p.battery},   {"battery_cost", p.battery_cost},
           {"hydrogen", p.hydrogen}, {"hes_cost", p.hes_cost},
           {"cost_mode", p.cost_mode}, {"battery_kwh", p.battery_kwh},
           {"kw_per_mj_h", p.kw_per_mj_h}};
}

void from_json(const json& j, PlantModel& p) {
  const PlantModel d;
  p.battery = j.value("battery", d.battery);
  p.battery_cost = j.value("battery_cost", d.battery_cost);
  p.hydrogen = j.value("hydrogen", d.hydrogen);
  p.hes_cost = j.value("hes_cost", d.hes_cost);
  p.cost_mode = j.value("cost_mode", d.cost_mode);
  p.battery_kwh = j.value("battery_kwh", d.battery_kwh);
  p.kw_per_mj_h = j.value("kw_per_mj_h", d.kw_per_mj_h);
}

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.begin(), v.end()); }

Eigen::VectorXd json_vec(const json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

Eigen::Vector4d json_vec4(const json& j, const std::string& what) {
  const Eigen::VectorXd v = json_vec(j);
  if (v.size() != 4) throw ValidationError(what + ": expected 4 values");
  return v;
}

json mat_json(const Eigen::MatrixXd& m) {
  json cols = json::array();
  for (Eigen::Index c = 0; c < m.cols(); ++c) cols.push_back(vec_json(m.col(c)));
  return cols;
}

Eigen::MatrixXd json_mat(const json& j) {
  if (!j.is_array() || j.empty()) throw ValidationError("matrix: expected a list of columns");
  const Eigen::Index rows = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, static_cast<Eigen::Index>(j.size()));
  for (std::size_t c = 0; c < j.size(); ++c) {
    const Eigen::VectorXd col = json_vec(j[c]);
    if (col.size() != rows) throw ValidationError("matrix: ragged columns");
    m.col(static_cast<Eigen::Index>(c)) = col;
  }
  return m;
}

json net_json(const Net& net) {
  return json{{"widths", net.widths()},
              {"output", net.output_activation() == Activation::kTanh ? "tanh" : "linear"},
              {"params", vec_json(net.params())}};
}

Net json_net(const json& j) {
  const std::string act = j.at("output").get<std::string>();
  if (act != "tanh" && act != "linear") throw ValidationError("net: bad output activation");
  Net net(j.at("widths").get<std::vector<int>>(),
          act == "tanh" ? Activation::kTanh : Activation::kLinear);
  const Eigen::VectorXd p = json_vec(j.at("params"));
  if (p.size() != net.parameter_count()) throw ValidationError("net: parameter count mismatch");
  net.set_params(p);
  return net;
}

json states_json(const PrototypeStates& s) {
  json out = json::array();
  for (const auto& p : s) {
    out.push_back({{"label", p.label}, {"action", p.intuitive_action}, {"obs", vec_json(p.obs)}});
  }
  return out;
}

PrototypeStates json_states(const json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw ValidationError("prototypes: expected exactly four prototypical states");
  }
  PrototypeStates s;
  for (std::size_t k = 0; k < 4; ++k) {
    s[k].label = j[k].at("label").get<std::string>();
    s[k].intuitive_action = j[k].value("action", std::string{});
    s[k].obs = json_vec4(j[k].at("obs"), "prototype obs");
  }
  return s;
}

// Rejects keys of `in` that the reference document does not have.
void check_keys(const json& in, const json& ref, const std::string& path) {
  if (!in.is_object()) throw ValidationError("config: '" + path + "' must be an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw ValidationError("config: unknown key '" + key + "'");
    const json& r = ref.at(it.key());
    if (r.is_object()) check_keys(it.value(), r, key);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

}  // namespace

// --- cases and methods -----------------------------------------------------

CaseSpec case_spec(int id) {
  CaseSpec c;
  c.id = id;
  switch (id) {
    case 1:
      c.description = "battery and hydrogen storage with degradation costs";
      break;
    case 2:
      c.devices.bes_cost_enabled = false;
      c.devices.hes_cost_enabled = false;
      c.description = "battery and hydrogen storage without costs";
      break;
    case 3:
      c.devices.hes_enabled = false;
      c.devices.hes_cost_enabled = false;
      c.description = "battery storage only, with cost";
      break;
    case 4:
      c.devices.bes_enabled = false;
      c.devices.bes_cost_enabled = false;
      c.description = "hydrogen storage only, with cost";
      break;
    default:
      throw ValidationError("case must be 1, 2, 3 or 4 (got " + std::to_string(id) + ")");
  }
  return c;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kBlackbox: return "blackbox";
    case Method::kProto: return "proto";
    case Method::kProtoVariant: return "proto-variant";
    case Method::kKMeans: return "kmeans";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::kBlackbox, Method::kProto, Method::kProtoVariant, Method::kKMeans}) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown method '" + name +
                        "' (expected blackbox, proto, proto-variant or kmeans)");
}

// --- configuration ---------------------------------------------------------

void validate(const ExperimentConfig& c) {
  validate(c.plant);
  validate(c.episode);
  validate(c.ppo);
  if (c.dataset_size <= 0) throw ValidationError("config: dataset_size must be positive");
  if (c.trials <= 0 || c.sims_per_trial <= 0) {
    throw ValidationError("config: trials and sims_per_trial must be positive");
  }
  if (c.kmeans_max_iter <= 0) throw ValidationError("config: kmeans_max_iter must be positive");
  if (c.distill.epochs < 0 || c.distill.minibatch <= 0 || !(c.distill.lr > 0.0) ||
      !(c.distill.holdout >= 0.0 && c.distill.holdout < 1.0) || c.distill.hidden <= 0) {
    throw ValidationError("config: invalid distill section");
  }
  if (c.data.csv.empty() && c.data.synth_days <= 0) {
    throw ValidationError("config: data.synth_days must be positive");
  }
}

json to_json(const ExperimentConfig& c) {
  json j{{"plant", c.plant},
         {"episode", c.episode},
         {"mapping", c.mapping},
         {"ppo", c.ppo},
         {"distill", c.distill},
         {"data", c.data},
         {"dataset_size", c.dataset_size},
         {"kmeans_max_iter", c.kmeans_max_iter},
         {"trials", c.trials},
         {"sims_per_trial", c.sims_per_trial},
         {"seed", c.seed},
         {"prototypes", nullptr}};
  if (c.prototypes) j["prototypes"] = states_json(*c.prototypes);
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  const ExperimentConfig d;
  check_keys(j, to_json(d), "");
  ExperimentConfig c;
  try {
    c.plant = j.value("plant", d.plant);
    c.episode = j.value("episode", d.episode);
    c.mapping = j.value("mapping", d.mapping);
    c.ppo = j.value("ppo", d.ppo);
    c.distill = j.value("distill", d.distill);
    c.data = j.value("data", d.data);
    c.dataset_size = j.value("dataset_size", d.dataset_size);
    c.kmeans_max_iter = j.value("kmeans_max_iter", d.kmeans_max_iter);
    c.trials = j.value("trials", d.trials);
    c.sims_per_trial = j.value("sims_per_trial", d.sims_per_trial);
    c.seed = j.value("seed", d.seed);
    if (j.contains("prototypes") && !j.at("prototypes").is_null()) {
      c.prototypes = json_states(j.at("prototypes"));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  try {
    return config_from_json(parse_json_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return out.str();
}

std::string config_digest(const ExperimentConfig& config) {
  return sha256_hex(to_json(config).dump());
}

MarketSeries load_data(const ExperimentConfig& c) {
  if (!c.data.csv.empty()) return load_series(c.data.csv);
  return synth_series(c.data.synth_days, c.data.synth_seed, c.data.profile);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace seed_tag {
constexpr std::uint64_t kTrain = 100;
constexpr std::uint64_t kDataset = 200;
constexpr std::uint64_t kProtoInit = 300;
constexpr std::uint64_t kProtoTrain = 301;
constexpr std::uint64_t kVariantInit = 302;
constexpr std::uint64_t kVariantTrain = 303;
constexpr std::uint64_t kKMeans = 304;
constexpr std::uint64_t kEval = 400;
}  // namespace seed_tag

// --- case context ----------------------------------------------------------

CaseContext make_context(const ExperimentConfig& config, int case_id) {
  return make_context(config, case_id, load_data(config));
}

CaseContext make_context(const ExperimentConfig& config, int case_id, MarketSeries series) {
  validate(config);
  CaseContext ctx{config, case_spec(case_id), std::move(series), {}};
  validate(ctx.series);
  if (ctx.series.size() < static_cast<std::size_t>(config.episode.horizon) + 1) {
    throw ValidationError("data too short: need at least " +
                          std::to_string(config.episode.horizon + 1) + " hourly rows");
  }
  ctx.box = make_observation_box(ctx.series, config.plant);
  return ctx;
}

MarketEnvironment CaseContext::make_env() const {
  EpisodeConfig ep = config.episode;
  ep.devices = spec.devices;
  return MarketEnvironment(&series, ep, config.plant, box, config.mapping);
}

EnvFactory CaseContext::factory() const {
  return [this] { return std::make_unique<MarketEnvironment>(make_env()); };
}

TrainResult train_blackbox(const CaseContext& ctx, LrSchedule schedule) {
  PpoConfig ppo = ctx.config.ppo;
  ppo.schedule = schedule;
  return train(ctx.factory(), ppo, derive_seed(ctx.config.seed, seed_tag::kTrain));
}

// --- policies --------------------------------------------------------------

Eigen::VectorXd PolicyBundle::levels(const Eigen::VectorXd& obs) const {
  switch (method) {
    case Method::kBlackbox: return agent.mean(obs);
    case Method::kProto: return compose_action(obs, agent.encoder(), protos, {}, {}).levels;
    case Method::kKMeans: return kmeans.levels(agent.latent(obs)).col(0);
    case Method::kProtoVariant: return variant.levels(agent.latent(obs)).col(0);
  }
  throw ContractViolation("unknown method");
}

PrototypeStates prototype_states(const CaseContext& ctx) {
  return ctx.config.prototypes ? *ctx.config.prototypes : default_prototypes(ctx.box);
}

Dataset collect_case_dataset(const CaseContext& ctx, const ActorCritic& agent) {
  MarketEnvironment env = ctx.make_env();
  Rng rng(derive_seed(ctx.config.seed, seed_tag::kDataset, static_cast<std::uint64_t>(ctx.spec.id)));
  return collect_dataset(agent, env, ctx.config.dataset_size, rng);
}

PolicyBundle make_bundle(const CaseContext& ctx, const ActorCritic& agent, const Dataset& data,
                         Method method) {
  const ExperimentConfig& cfg = ctx.config;
  PolicyBundle b;
  b.method = method;
  b.case_id = ctx.spec.id;
  b.box = ctx.box;
  b.agent = agent;
  DistillConfig dc = cfg.distill;
  switch (method) {
    case Method::kBlackbox:
      break;
    case Method::kProto: {
      Rng rng(derive_seed(cfg.seed, seed_tag::kProtoInit));
      PrototypeSet init(prototype_states(ctx), ctx.box, agent.latent_dim(), dc.hidden, rng);
      dc.seed = derive_seed(cfg.seed, seed_tag::kProtoTrain);
      DistillResult r = distill(agent, data, std::move(init), dc);
      b.protos = std::move(r.protos);
      b.initial_mse = r.initial_mse;
      b.final_mse = r.final_mse;
      break;
    }
    case Method::kProtoVariant: {
      Rng rng(derive_seed(cfg.seed, seed_tag::kVariantInit));
      LearnedProtoVariant init = init_variant(agent.latent_dim(), dc.hidden, rng);
      dc.seed = derive_seed(cfg.seed, seed_tag::kVariantTrain);
      VariantResult r = train_variant(agent, data, std::move(init), dc);
      b.variant = std::move(r.variant);
      b.initial_mse = r.initial_mse;
      b.final_mse = r.final_mse;
      break;
    }
    case Method::kKMeans: {
      b.kmeans = fit_kmeans_proto(data, derive_seed(cfg.seed, seed_tag::kKMeans),
                                  cfg.kmeans_max_iter);
      b.final_mse = compute_mse(b.kmeans.levels(data.latents).cwiseMax(0.0).cwiseMin(1.0), data.targets);
      b.initial_mse = b.final_mse;
      break;
    }
  }
  return b;
}

json bundle_to_json(const PolicyBundle& b) {
  std::ostringstream agent;
  save_actor_critic(agent, b.agent);
  json j{{"format", "pvess-pset"},
         {"version", 1},
         {"method", to_string(b.method)},
         {"case", b.case_id},
         {"box", {{"lo", vec_json(b.box.lo)}, {"hi", vec_json(b.box.hi)}}},
         {"agent", agent.str()},
         {"initial_mse", b.initial_mse},
         {"final_mse", b.final_mse}};
  switch (b.method) {
    case Method::kBlackbox:
      break;
    case Method::kProto: {
      json nets = json::array();
      for (int k = 0; k < 4; ++k) nets.push_back(net_json(b.protos.transform(k)));
      j["prototypes"] = {{"states", states_json(b.protos.states())},
                         {"inputs", mat_json(b.protos.state_inputs())},
                         {"transforms", nets},
                         {"cache", mat_json(b.protos.prototypes())},
                         {"epsilon", b.protos.epsilon()}};
      break;
    }
    case Method::kProtoVariant:
      j["variant"] = {{"transform", net_json(b.variant.transform)},
                      {"prototypes", mat_json(b.variant.prototypes)},
                      {"mapped_index", b.variant.mapped_index},
                      {"mapped_states", mat_json(b.variant.mapped_states)},
                      {"epsilon", b.variant.epsilon}};
      break;
    case Method::kKMeans:
      j["kmeans"] = {{"centroids", mat_json(b.kmeans.centroids)},
                     {"mapped_index", b.kmeans.mapped_index},
                     {"mapped_states", mat_json(b.kmeans.mapped_states)},
                     {"prototypes", mat_json(b.kmeans.prototypes)},
                     {"weights", mat_json(b.kmeans.weights)},
                     {"epsilon", b.kmeans.epsilon}};
      break;
  }
  return j;
}

PolicyBundle bundle_from_json(const json& j) {
  try {
    if (j.at("format") != "pvess-pset" || j.at("version") != 1) {
      throw ValidationError("not a pvess-pset version 1 file");
    }
    PolicyBundle b;
    b.method = parse_method(j.at("method").get<std::string>());
    b.case_id = case_spec(j.at("case").get<int>()).id;
    b.box.lo = json_vec4(j.at("box").at("lo"), "box.lo");
    b.box.hi = json_vec4(j.at("box").at("hi"), "box.hi");
    std::istringstream agent(j.at("agent").get<std::string>());
    b.agent = load_actor_critic(agent);
    b.initial_mse = j.at("initial_mse").get<double>();
    b.final_mse = j.at("final_mse").get<double>();
    switch (b.method) {
      case Method::kBlackbox:
        break;
      case Method::kProto: {
        const json& p = j.at("prototypes");
        std::array<Net, 4> nets;
        if (p.at("transforms").size() != 4) throw ValidationError("expected four transforms");
        for (std::size_t k = 0; k < 4; ++k) nets[k] = json_net(p.at("transforms")[k]);
        const Eigen::MatrixXd inputs = json_mat(p.at("inputs"));
        if (inputs.rows() != 4 || inputs.cols() != 4) throw ValidationError("bad state inputs");
        b.protos = PrototypeSet::from_parts(json_states(p.at("states")), inputs, std::move(nets),
                                            json_mat(p.at("cache")), p.at("epsilon").get<double>());
        if (b.protos.latent_dim() != b.agent.latent_dim()) {
          throw ValidationError("transform width does not match the encoder");
        }
        break;
      }
      case Method::kProtoVariant: {
        const json& v = j.at("variant");
        b.variant.transform = json_net(v.at("transform"));
        b.variant.prototypes = json_mat(v.at("prototypes"));
        b.variant.mapped_index = v.at("mapped_index").get<std::array<Eigen::Index, 4>>();
        b.variant.mapped_states = json_mat(v.at("mapped_states"));
        b.variant.epsilon = v.at("epsilon").get<double>();
        break;
      }
      case Method::kKMeans: {
        const json& m = j.at("kmeans");
        b.kmeans.centroids = json_mat(m.at("centroids"));
        b.kmeans.mapped_index = m.at("mapped_index").get<std::array<Eigen::Index, 4>>();
        b.kmeans.mapped_states = json_mat(m.at("mapped_states"));
        b.kmeans.prototypes = json_mat(m.at("prototypes"));
        b.kmeans.weights = json_mat(m.at("weights"));
        b.kmeans.epsilon = m.at("epsilon").get<double>();
        break;
      }
    }
    return b;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("policy file: ") + e.what());
  }
}

void save_bundle(const PolicyBundle& bundle, const std::filesystem::path& path) {
  write_file_atomic(path, bundle_to_json(bundle).dump() + "\n");
}

PolicyBundle load_bundle(const std::filesystem::path& path) {
  try {
    return bundle_from_json(parse_json_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

json explanation_to_json(const Explanation& e, int t, const Eigen::Vector4d& obs) {
  return json{{"t", t},
              {"obs", vec_json(obs)},
              {"sims", e.sims},
              {"contributions", e.contributions},
              {"action", std::array<double, 3>{e.action.p_bat, e.action.p_el, e.action.p_fc}},
              {"nearest_prototype", e.nearest_label}};
}

ExplanationRecord explanation_from_json(const json& j) {
  try {
    ExplanationRecord r;
    r.t = j.at("t").get<int>();
    r.obs = json_vec4(j.at("obs"), "obs");
    r.sims = j.at("sims").get<std::array<double, 4>>();
    r.contributions = j.at("contributions").get<std::array<double, 4>>();
    r.action = j.at("action").get<std::array<double, 3>>();
    r.nearest_prototype = j.at("nearest_prototype").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("explanation: ") + e.what());
  }
}

// --- metrics ---------------------------------------------------------------

double compute_mse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("compute_mse: action sequences differ in length or dimension");
  }
  if (a.size() == 0) throw ValidationError("compute_mse: empty action sequences");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

MeanSe mean_and_se(const std::vector<double>& xs) {
  MeanSe out;
  if (xs.empty()) return out;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) out.mean += x;
  out.mean /= n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / (n - 1.0) / n);
  }
  return out;
}

MetricsReport evaluate_bundle(const CaseContext& ctx, const PolicyBundle& bundle) {
  const ExperimentConfig& cfg = ctx.config;
  if (bundle.case_id != ctx.spec.id) {
    throw ValidationError("policy was built for case " + std::to_string(bundle.case_id) +
                          ", not case " + std::to_string(ctx.spec.id));
  }
  if (bundle.box.lo != ctx.box.lo || bundle.box.hi != ctx.box.hi) {
    throw ValidationError("policy was built on a different observation box (data changed?)");
  }
  MetricsReport r;
  r.case_id = ctx.spec.id;
  r.method = to_string(bundle.method);
  r.trials = cfg.trials;
  r.sims_per_trial = cfg.sims_per_trial;
  r.seed = cfg.seed;
  r.config_digest = config_digest(cfg);

  MarketEnvironment env = ctx.make_env();
  std::vector<double> bb_rewards;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const std::uint64_t seed = derive_seed(cfg.seed, seed_tag::kEval, static_cast<std::uint64_t>(trial));
    r.trial_seeds.push_back(seed);
    Rng rng(seed);
    std::vector<Eigen::Vector4d> mine, reference;
    double total = 0.0;
    for (int sim = 0; sim < cfg.sims_per_trial; ++sim) {
      Eigen::VectorXd obs = env.reset(rng);
      while (true) {
        const Eigen::VectorXd u = bundle.levels(obs);
        mine.push_back(clip_levels(u.head<4>()));
        reference.push_back(clip_levels(bundle.agent.mean(obs).head<4>()));
        const Transition tr = env.step(u);
        total += tr.reward;
        if (tr.done) break;
        obs = tr.observation;
      }
    }
    r.trial_rewards.push_back(total / cfg.sims_per_trial);
    Eigen::MatrixXd a(4, static_cast<Eigen::Index>(mine.size()));
    Eigen::MatrixXd b(4, a.cols());
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
      a.col(i) = mine[static_cast<std::size_t>(i)];
      b.col(i) = reference[static_cast<std::size_t>(i)];
    }
    r.trial_mse.push_back(compute_mse(a, b));

    if (bundle.method == Method::kBlackbox) {
      bb_rewards.push_back(r.trial_rewards.back());
    } else {
      Rng bb_rng(seed);
      bb_rewards.push_back(evaluate_policy(
          env, [&](const Eigen::VectorXd& o) { return bundle.agent.mean(o); },
          cfg.sims_per_trial, bb_rng));
    }
  }
  r.reward = mean_and_se(r.trial_rewards);
  r.mse = mean_and_se(r.trial_mse);
  r.blackbox_reward = mean_and_se(bb_rewards).mean;
  return r;
}

json report_to_json(const MetricsReport& r) {
  return json{{"case", r.case_id},
              {"method", r.method},
              {"trials", r.trials},
              {"sims_per_trial", r.sims_per_trial},
              {"reward", {{"mean", r.reward.mean}, {"se", r.reward.se}}},
              {"mse", {{"mean", r.mse.mean}, {"se", r.mse.se}}},
              {"blackbox_reward", r.blackbox_reward},
              {"trial_rewards", r.trial_rewards},
              {"trial_mse", r.trial_mse},
              {"trial_seeds", r.trial_seeds},
              {"seed", r.seed},
              {"config_digest", r.config_digest},
              {"final_train_loss", r.final_train_loss},
              {"final_train_loss_meaning", "final-epoch mean PPO loss of the black-box agent"}};
}

MetricsReport report_from_json(const json& j) {
  static const char* const kRequired[] = {
      "case",         "method",    "trials",      "sims_per_trial", "reward",
      "mse",          "blackbox_reward", "trial_rewards", "trial_mse", "trial_seeds",
      "seed",         "config_digest",   "final_train_loss"};
  if (!j.is_object()) throw ValidationError("report: expected an object");
  for (const char* key : kRequired) {
    if (!j.contains(key)) throw ValidationError(std::string("report: missing required field '") + key + "'");
  }
  try {
    MetricsReport r;
    r.case_id = case_spec(j.at("case").get<int>()).id;
    r.method = to_string(parse_method(j.at("method").get<std::string>()));
    r.trials = j.at("trials").get<int>();
    r.sims_per_trial = j.at("sims_per_trial").get<int>();
    r.reward = {j.at("reward").at("mean").get<double>(), j.at("reward").at("se").get<double>()};
    r.mse = {j.at("mse").at("mean").get<double>(), j.at("mse").at("se").get<double>()};
    r.blackbox_reward = j.at("blackbox_reward").get<double>();
    r.trial_rewards = j.at("trial_rewards").get<std::vector<double>>();
    r.trial_mse = j.at("trial_mse").get<std::vector<double>>();
    r.trial_seeds = j.at("trial_seeds").get<std::vector<std::uint64_t>>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_digest = j.at("config_digest").get<std::string>();
    r.final_train_loss = j.at("final_train_loss").get<double>();
    const auto n = static_cast<std::size_t>(r.trials);
    if (r.trials <= 0 || r.sims_per_trial <= 0 || r.trial_rewards.size() != n ||
        r.trial_mse.size() != n || r.trial_seeds.size() != n) {
      throw ValidationError("report: per-trial arrays do not match the trial count");
    }
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report: ") + e.what());
  }
}

// --- orchestration ---------------------------------------------------------

CaseRun run_case(const ExperimentConfig& config, int case_id, const std::vector<Method>& methods) {
  const CaseContext ctx = make_context(config, case_id);
  CaseRun run;
  TrainResult trained = train_blackbox(ctx, config.ppo.schedule);
  run.agent = trained.net;
  run.curve = std::move(trained.curve);
  const double final_loss = run.curve.empty() ? 0.0 : run.curve.back().loss;

  bool need_data = false;
  for (Method m : methods) need_data = need_data || m != Method::kBlackbox;
  Dataset data;
  if (need_data) data = collect_case_dataset(ctx, run.agent);

  for (Method m : methods) {
    PolicyBundle b = make_bundle(ctx, run.agent, data, m);
    MetricsReport r = evaluate_bundle(ctx, b);
    r.final_train_loss = final_loss;
    run.reports.push_back(std::move(r));
    run.bundles.push_back(std::move(b));
  }
  return run;
}

AblationRun lr_ablation(const ExperimentConfig& config, const std::vector<LrSchedule>& schedules,
                        int case_id) {
  if (schedules.empty()) throw ValidationError("lr_ablation: no schedules given");
  const CaseContext ctx = make_context(config, case_id);
  AblationRun run;
  for (LrSchedule s : schedules) {
    TrainResult trained = train_blackbox(ctx, s);
    PolicyBundle b;
    b.case_id = case_id;
    b.box = ctx.box;
    b.agent = trained.net;
    MetricsReport r = evaluate_bundle(ctx, b);
    r.method = to_string(Method::kBlackbox);
    r.final_train_loss = trained.curve.empty() ? 0.0 : trained.curve.back().loss;
    run.schedules.push_back(s);
    run.curves.push_back(std::move(trained.curve));
    run.final_eval.push_back(std::move(r));
    run.env_seeds.push_back(derive_seed(config.seed, seed_tag::kTrain));
  }
  return run;
}

// --- files -----------------------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw ValidationError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ValidationError("cannot move " + tmp.string() + " to " + path.string());
  }
}

void emit_report(const std::vector<MetricsReport>& reports, const std::filesystem::path& path) {
  json j{{"format", "pvess-report"}, {"version", 1}, {"reports", json::array()}};
  for (const auto& r : reports) j["reports"].push_back(report_to_json(r));
  write_file_atomic(path, j.dump(2) + "\n");

  std::ostringstream csv;
  csv << std::setprecision(17);
  csv << "case,method,trial,seed,reward,mse,blackbox_reward\n";
  for (const auto& r : reports) {
    for (std::size_t t = 0; t < r.trial_rewards.size(); ++t) {
      csv << r.case_id << ',' << r.method << ',' << t << ',' << r.trial_seeds[t] << ','
          << r.trial_rewards[t] << ',' << r.trial_mse[t] << ',' << r.blackbox_reward << '\n';
    }
  }
  std::filesystem::path csv_path = path;
  csv_path.replace_extension(".csv");
  write_file_atomic(csv_path, csv.str());
}

std::vector<MetricsReport> load_reports(const std::filesystem::path& path) {
  const json j = parse_json_file(path);
  if (!j.is_object() || j.value("format", "") != "pvess-report" || !j.contains("reports") ||
      !j.at("reports").is_array()) {
    throw ValidationError(path.string() + ": not a pvess report");
  }
  std::vector<MetricsReport> out;
  for (const auto& r : j.at("reports")) {
    try {
      out.push_back(report_from_json(r));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  }
  return out;
}

void emit_ablation(const AblationRun& run, const std::filesystem::path& csv_path,
                   const std::filesystem::path& json_path) {
  std::size_t rows = 0;
  for (const auto& c : run.curves) rows = std::max(rows, c.size());
  std::ostringstream csv;
  csv << std::setprecision(17) << "update";
  for (LrSchedule s : run.schedules) csv << ',' << to_string(s);
  csv << '\n';
  for (std::size_t i = 0; i < rows; ++i) {
    csv << i;
    for (const auto& c : run.curves) {
      csv << ',';
      if (i < c.size()) csv << c[i].mean_reward;
    }
    csv << '\n';
  }
  write_file_atomic(csv_path, csv.str());

  json j{{"format", "pvess-lr-ablation"}, {"version", 1}, {"schedules", json::array()}};
  for (std::size_t i = 0; i < run.schedules.size(); ++i) {
    const auto& c = run.curves[i];
    j["schedules"].push_back({{"schedule", to_string(run.schedules[i])},
                              {"env_seed", run.env_seeds[i]},
                              {"first_lr", c.empty() ? 0.0 : c.front().lr},
                              {"final_curve_reward", c.empty() ? 0.0 : c.back().mean_reward},
                              {"final_train_loss", c.empty() ? 0.0 : c.back().loss},
                              {"final_eval", report_to_json(run.final_eval[i])}});
  }
  write_file_atomic(json_path, j.dump(2) + "\n");
}

}  // namespace pvess
