#pragma once

// Experiment orchestration: configuration, the four device cases, training
// and distillation pipelines, the 5 x 30 evaluation protocol, the learning
// rate ablation and report files.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvess/baselines.hpp"
#include "pvess/market_env.hpp"
#include "pvess/ppo.hpp"
#include "pvess/proto_policy.hpp"

namespace pvess {

using json = nlohmann::json;

struct CaseSpec {
  int id = 1;
  DeviceMask devices;
  std::string description;
};

/// Case 1: both devices with costs; 2: both devices, no costs;
/// 3: battery only with cost; 4: hydrogen only with cost.
CaseSpec case_spec(int id);

enum class Method { kBlackbox, kProto, kProtoVariant, kKMeans };

std::string to_string(Method m);
Method parse_method(const std::string& name);  // blackbox | proto | proto-variant | kmeans

struct DataConfig {
  std::string csv;  // when empty, a synthetic series is generated
  int synth_days = 365;
  std::uint64_t synth_seed = 7;
  SynthProfile profile;
};

struct ExperimentConfig {
  PlantModel plant;
  EpisodeConfig episode;
  ActionMapping mapping;
  PpoConfig ppo;
  DistillConfig distill;
  DataConfig data;
  int dataset_size = 10'000;
  int kmeans_max_iter = 100;
  int trials = 5;
  int sims_per_trial = 30;
  std::uint64_t seed = 1;
  std::optional<PrototypeStates> prototypes;  // defaults to the box corners
};

void validate(const ExperimentConfig& config);

json to_json(const ExperimentConfig& config);
/// Keys absent from `j` keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// SHA-256 (hex) of the canonical JSON form of the configuration.
std::string config_digest(const ExperimentConfig& config);
std::string sha256_hex(const std::string& bytes);

MarketSeries load_data(const ExperimentConfig& config);

/// Seed for a named purpose, derived from the master seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

// Everything a case needs to build environments.
struct CaseContext {
  ExperimentConfig config;
  CaseSpec spec;
  MarketSeries series;
  ObservationBox box;

  [[nodiscard]] MarketEnvironment make_env() const;
  [[nodiscard]] EnvFactory factory() const;
};

CaseContext make_context(const ExperimentConfig& config, int case_id);
CaseContext make_context(const ExperimentConfig& config, int case_id, MarketSeries series);

TrainResult train_blackbox(const CaseContext& ctx, LrSchedule schedule);

// A deployable policy: the pretrained agent (whose encoder the interpretable
// methods share) plus the method-specific parameters.
struct PolicyBundle {
  Method method = Method::kBlackbox;
  int case_id = 1;
  ObservationBox box;
  ActorCritic agent;
  PrototypeSet protos;
  KMeansProto kmeans;
  LearnedProtoVariant variant;
  double initial_mse = 0.0;  // distillation held-out MSE
  double final_mse = 0.0;

  /// Policy levels for a normalised observation.
  [[nodiscard]] Eigen::VectorXd levels(const Eigen::VectorXd& obs) const;
};

PrototypeStates prototype_states(const CaseContext& ctx);

Dataset collect_case_dataset(const CaseContext& ctx, const ActorCritic& agent);

PolicyBundle make_bundle(const CaseContext& ctx, const ActorCritic& agent, const Dataset& data,
                         Method method);

json bundle_to_json(const PolicyBundle& bundle);
PolicyBundle bundle_from_json(const json& j);
void save_bundle(const PolicyBundle& bundle, const std::filesystem::path& path);
PolicyBundle load_bundle(const std::filesystem::path& path);

json explanation_to_json(const Explanation& e, int t, const Eigen::Vector4d& obs);
struct ExplanationRecord {
  int t = 0;
  Eigen::Vector4d obs = Eigen::Vector4d::Zero();
  std::array<double, 4> sims{};
  std::array<double, 4> contributions{};
  std::array<double, 3> action{};
  std::string nearest_prototype;

  friend bool operator==(const ExplanationRecord&, const ExplanationRecord&) = default;
};
ExplanationRecord explanation_from_json(const json& j);

/// Mean over steps and dimensions of the squared difference. Columns are
/// steps.
double compute_mse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;

  friend bool operator==(const MeanSe&, const MeanSe&) = default;
};

MeanSe mean_and_se(const std::vector<double>& xs);

struct MetricsReport {
  int case_id = 1;
  std::string method;
  int trials = 5;
  int sims_per_trial = 30;
  MeanSe reward;
  MeanSe mse;  // action MSE against the black-box policy on visited states
  double blackbox_reward = 0.0;
  std::vector<double> trial_rewards;
  std::vector<double> trial_mse;
  std::vector<std::uint64_t> trial_seeds;
  std::uint64_t seed = 0;
  std::string config_digest;
  double final_train_loss = 0.0;  // final-epoch mean PPO loss of the black-box agent

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Runs the 5 x 30 deterministic evaluation of `bundle` in `ctx`.
MetricsReport evaluate_bundle(const CaseContext& ctx, const PolicyBundle& bundle);

json report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const json& j);  // ValidationError on a schema violation

struct CaseRun {
  std::vector<MetricsReport> reports;
  std::vector<CurvePoint> curve;
  ActorCritic agent;
  std::vector<PolicyBundle> bundles;
};

/// Trains the black-box agent for the case, distils every requested method
/// from it and evaluates all of them under identical seeds.
CaseRun run_case(const ExperimentConfig& config, int case_id, const std::vector<Method>& methods);

struct AblationRun {
  std::vector<LrSchedule> schedules;
  std::vector<std::vector<CurvePoint>> curves;
  std::vector<MetricsReport> final_eval;  // deterministic evaluation of each final policy
  std::vector<std::uint64_t> env_seeds;
};

AblationRun lr_ablation(const ExperimentConfig& config, const std::vector<LrSchedule>& schedules,
                        int case_id = 1);

/// Atomic write: `path` never holds a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

/// JSON report plus a plot-ready CSV (one row per method and trial) next to
/// it with the extension replaced by .csv.
void emit_report(const std::vector<MetricsReport>& reports, const std::filesystem::path& path);
std::vector<MetricsReport> load_reports(const std::filesystem::path& path);

/// CSV with an `update` column and one mean-reward column per schedule, plus
/// a JSON summary.
void emit_ablation(const AblationRun& run, const std::filesystem::path& csv_path,
                   const std::filesystem::path& json_path);

}  // namespace pvess
