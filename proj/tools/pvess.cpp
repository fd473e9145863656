// Command-line front end for the PV + battery + hydrogen storage laboratory.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pvess/harness.hpp"

namespace fs = std::filesystem;
using namespace pvess;

namespace {

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

Eigen::Vector4d parse_obs(const std::string& text) {
  std::vector<double> xs;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      std::size_t used = 0;
      xs.push_back(std::stod(field, &used));
      if (used != field.size()) throw std::invalid_argument(field);
    } catch (const std::exception&) {
      throw ValidationError("--obs: '" + field + "' is not a number");
    }
  }
  if (xs.size() != 4) throw ValidationError("--obs needs four values: price,pv,soc,loh");
  return {xs[0], xs[1], xs[2], xs[3]};
}

void note(const std::string& msg) { std::cerr << "pvess: " << msg << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PV + battery + hydrogen storage scheduling with prototype-based policies"};
  app.require_subcommand(1);

  std::string config_path;

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic hourly price/PV CSV");
  int days = 365;
  std::uint64_t synth_seed = 7;
  std::string synth_out;
  synth->add_option("--days", days, "Number of days")->required()->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "Generator seed")->required();
  synth->add_option("--out", synth_out, "Output CSV")->required();

  auto* train_cmd = app.add_subcommand("train", "Train the black-box PPO agent for a case");
  int case_id = 1;
  std::string schedule_name = "adaptive";
  std::string ckpt_path;
  std::string curve_path;
  train_cmd->add_option("--config", config_path, "JSON config (defaults when omitted)");
  train_cmd->add_option("--case", case_id, "Case 1-4")->required();
  train_cmd->add_option("--lr-schedule", schedule_name,
                        "adaptive, const_1e-2, const_1e-4 or decay_0.95");
  train_cmd->add_option("--out", ckpt_path, "Checkpoint file")->required();
  train_cmd->add_option("--curve", curve_path, "Training curve CSV (default: <out>.curve.csv)");

  auto* distill_cmd = app.add_subcommand("distill", "Build an interpretable policy from a checkpoint");
  std::string method_name;
  std::string pset_path;
  distill_cmd->add_option("--config", config_path, "JSON config (defaults when omitted)");
  distill_cmd->add_option("--ckpt", ckpt_path, "Black-box checkpoint")->required();
  distill_cmd->add_option("--method", method_name, "proto, proto-variant or kmeans")->required();
  distill_cmd->add_option("--out", pset_path, "Policy file")->required();
  distill_cmd->add_option("--case", case_id, "Case the checkpoint was trained on");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a method over trials x simulations");
  std::string report_path;
  eval_cmd->add_option("--config", config_path, "JSON config (defaults when omitted)");
  eval_cmd->add_option("--case", case_id, "Case 1-4")->required();
  eval_cmd->add_option("--method", method_name, "blackbox, proto, proto-variant or kmeans")
      ->required();
  eval_cmd->add_option("--report", report_path, "Report JSON (a .csv is written next to it)")
      ->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "Black-box checkpoint (trained in-run when omitted)");
  eval_cmd->add_option("--pset", pset_path, "Policy file (built in-run when omitted)");

  auto* explain_cmd = app.add_subcommand("explain", "Explain one prototype-policy decision");
  std::string obs_text;
  int t = 0;
  explain_cmd->add_option("--config", config_path, "JSON config (defaults when omitted)");
  explain_cmd->add_option("--pset", pset_path, "Prototype policy file")->required();
  explain_cmd->add_option("--obs", obs_text, "price,pv,soc,loh")->required();
  explain_cmd->add_option("--t", t, "Time index recorded in the output");

  auto* run_cmd = app.add_subcommand("run-case", "Train, distil and evaluate methods for a case");
  bool all_methods = false;
  std::vector<std::string> method_names;
  std::string out_dir = ".";
  run_cmd->add_option("--config", config_path, "JSON config (defaults when omitted)");
  run_cmd->add_option("--case", case_id, "Case 1-4")->required();
  run_cmd->add_flag("--all-methods", all_methods, "blackbox, proto, proto-variant and kmeans");
  run_cmd->add_option("--method", method_names, "Method(s) to run");
  run_cmd->add_option("--report", report_path, "Report JSON (default: <out-dir>/case<K>_report.json)");
  run_cmd->add_option("--out-dir", out_dir, "Directory for the report and artifacts");

  auto* ablate_cmd = app.add_subcommand("ablate-lr", "Compare the four learning-rate schedules");
  ablate_cmd->add_option("--config", config_path, "JSON config (defaults when omitted)");
  ablate_cmd->add_option("--case", case_id, "Case 1-4");
  ablate_cmd->add_option("--out-dir", out_dir, "Directory for lr_curves.csv and lr_ablation.json");

  auto* template_cmd = app.add_subcommand("config-template", "Write the default configuration");
  std::string template_out;
  template_cmd->add_option("--out", template_out, "Output JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      save_series(synth_series(days, synth_seed), synth_out);
    } else if (*train_cmd) {
      const CaseContext ctx = make_context(config_or_default(config_path), case_id);
      note("training case " + std::to_string(case_id) + " with " + schedule_name + " for " +
           std::to_string(ctx.config.ppo.total_steps) + " steps");
      const TrainResult r = train_blackbox(ctx, parse_lr_schedule(schedule_name));
      save_actor_critic(ckpt_path, r.net);
      write_curve_csv(r.curve, curve_path.empty() ? ckpt_path + ".curve.csv" : curve_path);
    } else if (*distill_cmd) {
      const Method method = parse_method(method_name);
      if (method == Method::kBlackbox) throw ValidationError("distill: choose an interpretable method");
      const CaseContext ctx = make_context(config_or_default(config_path), case_id);
      const ActorCritic agent = load_actor_critic(ckpt_path);
      const Dataset data = collect_case_dataset(ctx, agent);
      const PolicyBundle b = make_bundle(ctx, agent, data, method);
      note("held-out action MSE " + std::to_string(b.initial_mse) + " -> " +
           std::to_string(b.final_mse));
      save_bundle(b, pset_path);
    } else if (*eval_cmd) {
      const Method method = parse_method(method_name);
      const ExperimentConfig cfg = config_or_default(config_path);
      const CaseContext ctx = make_context(cfg, case_id);
      PolicyBundle b;
      double final_loss = 0.0;
      if (!pset_path.empty()) {
        b = load_bundle(pset_path);
        if (b.method != method) {
          throw ValidationError(pset_path + " holds a " + to_string(b.method) + " policy, not " +
                                method_name);
        }
      } else {
        ActorCritic agent;
        if (!ckpt_path.empty()) {
          agent = load_actor_critic(ckpt_path);
        } else {
          note("no checkpoint given; training case " + std::to_string(case_id) + " in-run");
          const TrainResult r = train_blackbox(ctx, cfg.ppo.schedule);
          agent = r.net;
          final_loss = r.curve.empty() ? 0.0 : r.curve.back().loss;
        }
        Dataset data;
        if (method != Method::kBlackbox) data = collect_case_dataset(ctx, agent);
        b = make_bundle(ctx, agent, data, method);
      }
      MetricsReport r = evaluate_bundle(ctx, b);
      r.final_train_loss = final_loss;
      emit_report({r}, report_path);
    } else if (*explain_cmd) {
      const ExperimentConfig cfg = config_or_default(config_path);
      const PolicyBundle b = load_bundle(pset_path);
      if (b.method != Method::kProto) {
        throw ValidationError(pset_path + " holds a " + to_string(b.method) +
                              " policy; explain needs a proto policy");
      }
      const Eigen::Vector4d obs = parse_obs(obs_text);
      if (!b.box.contains(obs)) throw ValidationError("--obs lies outside the observation box");
      const Explanation e = explain(obs, b.box, b.agent.encoder(), b.protos, cfg.plant, cfg.mapping);
      std::cout << explanation_to_json(e, t, obs).dump() << '\n';
    } else if (*run_cmd) {
      std::vector<Method> methods;
      if (all_methods) {
        methods = {Method::kBlackbox, Method::kProto, Method::kProtoVariant, Method::kKMeans};
      } else {
        for (const auto& m : method_names) methods.push_back(parse_method(m));
      }
      if (methods.empty()) throw ValidationError("run-case: pass --all-methods or --method");
      const ExperimentConfig cfg = config_or_default(config_path);
      fs::create_directories(out_dir);
      const CaseRun run = run_case(cfg, case_id, methods);
      const fs::path report =
          report_path.empty() ? fs::path(out_dir) / ("case" + std::to_string(case_id) + "_report.json")
                              : fs::path(report_path);
      emit_report(run.reports, report);
      write_curve_csv(run.curve,
                      (fs::path(out_dir) / ("case" + std::to_string(case_id) + "_curve.csv")).string());
      for (const auto& r : run.reports) {
        std::cout << "case " << r.case_id << ' ' << r.method << ": reward " << r.reward.mean
                  << " +- " << r.reward.se << ", action MSE " << r.mse.mean << '\n';
      }
    } else if (*ablate_cmd) {
      const ExperimentConfig cfg = config_or_default(config_path);
      fs::create_directories(out_dir);
      const AblationRun run =
          lr_ablation(cfg,
                      {LrSchedule::kConst1e2, LrSchedule::kConst1e4, LrSchedule::kDecay095,
                       LrSchedule::kAdaptive},
                      case_id);
      emit_ablation(run, fs::path(out_dir) / "lr_curves.csv", fs::path(out_dir) / "lr_ablation.json");
      for (std::size_t i = 0; i < run.schedules.size(); ++i) {
        std::cout << to_string(run.schedules[i]) << ": final reward "
                  << run.final_eval[i].reward.mean << '\n';
      }
    } else if (*template_cmd) {
      write_file_atomic(template_out, to_json(ExperimentConfig{}).dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    std::cerr << "pvess: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
