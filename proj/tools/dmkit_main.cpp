#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "dmkit/builtin.hpp"
#include "dmkit/errors.hpp"
#include "dmkit/evaluation.hpp"
#include "dmkit/train.hpp"

namespace {

using dmkit::BatchDataset;
using nlohmann::json;

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw dmkit::ConfigError("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw dmkit::ParseError(path + ": " + e.what());
  }
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw dmkit::ConfigError("cannot open for writing: " + path);
  out << text;
}

std::string cache_dir() {
  const char* env = std::getenv("DMKIT_CACHE");
  return env ? env : ".";
}

int run_generate(const std::string& scenario_path, int n,
                 std::optional<uint64_t> seed, const std::string& out,
                 const std::string& csv, int jobs) {
  dmkit::Scenario s = dmkit::load_scenario(read_json_file(scenario_path), seed);
  BatchDataset d = dmkit::generate_batch(s, n, jobs);
  dmkit::serialize_dataset(d, out);
  if (!csv.empty()) dmkit::export_csv(d, csv);

  size_t steps = 0;
  int min_t = d.size() ? d.trajectories[0].length() : 0;
  int max_t = 0;
  for (const auto& t : d.trajectories) {
    steps += size_t(t.length());
    min_t = std::min(min_t, t.length());
    max_t = std::max(max_t, t.length());
  }
  double confoundedness =
      double(d.visible_temporal_dim()) / double(d.schema.temporal_space.dim());
  std::cout << "generated " << d.size() << " trajectories (" << steps
            << " steps, length " << min_t << ".." << max_t << ")\n"
            << "confoundedness " << confoundedness << "\n"
            << "digest " << d.provenance << "\n"
            << "wrote " << out << "\n";
  return 0;
}

int run_train(const std::string& env_kind, const std::string& data_path,
              const json& hyper, const dmkit::TrainConfig& cfg,
              const std::string& trainer, std::string out,
              const std::string& curve) {
  BatchDataset data = dmkit::deserialize_dataset(data_path);
  if (out.empty()) out = cache_dir() + "/" + env_kind + "_checkpoint.json";

  auto env = dmkit::seeded_env(env_kind, data.schema, cfg.seed, hyper);
  dmkit::TrainResult result;
  if (auto* rec = dynamic_cast<dmkit::RecurrentEnv*>(env.get())) {
    result = dmkit::train_env(*rec, data, cfg);
  } else if (auto* css = dynamic_cast<dmkit::CssModel*>(env.get())) {
    dmkit::CssTrainer mode = dmkit::CssTrainer::Auto;
    if (trainer == "exact") mode = dmkit::CssTrainer::Exact;
    if (trainer == "elbo") mode = dmkit::CssTrainer::Elbo;
    result = dmkit::train_env(*css, data, cfg, mode);
  } else if (auto* svae = dynamic_cast<dmkit::SvaeModel*>(env.get())) {
    result = dmkit::train_env(*svae, data, cfg);
  }

  dmkit::save_env_checkpoint(*env, cfg, out);
  if (!curve.empty()) dmkit::write_loss_curve(result, curve);
  std::cout << "trained " << env_kind << " for " << result.epoch_loss.size()
            << " epochs";
  if (!result.epoch_loss.empty())
    std::cout << " (final loss " << result.epoch_loss.back() << ")";
  std::cout << "\nwrote " << out << "\n";
  return 0;
}

int run_inspect(const std::string& data_path) {
  BatchDataset d = dmkit::deserialize_dataset(data_path);
  size_t steps = 0;
  int min_t = d.size() ? d.trajectories[0].length() : 0;
  int max_t = 0;
  for (const auto& t : d.trajectories) {
    steps += size_t(t.length());
    min_t = std::min(min_t, t.length());
    max_t = std::max(max_t, t.length());
  }
  json summary{{"schema", d.schema.name},
               {"n", d.size()},
               {"steps", steps},
               {"min_length", min_t},
               {"max_length", max_t},
               {"seed", d.seed},
               {"provenance", d.provenance},
               {"hidden_columns", d.hidden_columns},
               {"violations", dmkit::validate_dataset(d).size()}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dmkit: scenario-driven sequential decision data generator"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "sample a batch dataset");
  std::string gen_scenario, gen_out, gen_csv;
  int gen_n = 0, gen_jobs = 1;
  std::optional<uint64_t> gen_seed;
  gen->add_option("--scenario", gen_scenario, "scenario config JSON")->required();
  gen->add_option("--n", gen_n, "number of trajectories")->required();
  gen->add_option("--seed", gen_seed, "root seed (overrides the config)");
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_option("--csv", gen_csv, "optional wide-format CSV sidecar");
  gen->add_option("--jobs", gen_jobs, "parallel workers (output identical)");

  // train
  auto* tr = app.add_subcommand("train", "fit an environment model");
  std::string tr_env, tr_data, tr_out, tr_curve, tr_trainer = "auto";
  std::optional<uint64_t> tr_seed;
  dmkit::TrainConfig tr_cfg;
  double tr_dp_clip = 0.0, tr_dp_noise = -1.0;
  json tr_hyper = json::object();
  std::string tr_hyper_path;
  tr->add_option("--env", tr_env, "tforce|balanced|css|svae")->required();
  tr->add_option("--data", tr_data, "training dataset JSONL")->required();
  tr->add_option("--epochs", tr_cfg.epochs, "epochs");
  tr->add_option("--lr", tr_cfg.learning_rate, "learning rate");
  tr->add_option("--batch", tr_cfg.batch_size, "batch size");
  tr->add_option("--momentum", tr_cfg.momentum, "momentum");
  tr->add_option("--seed", tr_seed, "training seed (required)");
  tr->add_option("--dp-clip", tr_dp_clip, "per-example gradient clip norm");
  tr->add_option("--dp-noise", tr_dp_noise, "DP noise multiplier");
  tr->add_option("--trainer", tr_trainer, "css trainer: auto|exact|elbo");
  tr->add_option("--hyper", tr_hyper_path, "hyperparameter JSON file");
  tr->add_option("--out", tr_out, "checkpoint path (default $DMKIT_CACHE)");
  tr->add_option("--curve", tr_curve, "loss-curve CSV path");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "run a benchmark metric");
  std::string ev_metric, ev_synth, ev_real, ev_target, ev_out;
  std::string ev_policy_a, ev_policy_b, ev_probes, ev_theta_hat, ev_theta;
  std::optional<uint64_t> ev_seed;
  dmkit::EvalConfig ev_cfg;
  ev->add_option("--metric", ev_metric,
                 "predictive|discriminative|action-match|ground-truth")
      ->required();
  ev->add_option("--synthetic", ev_synth, "synthetic dataset JSONL");
  ev->add_option("--real", ev_real, "real dataset JSONL");
  ev->add_option("--target", ev_target, "binary target feature or 'action'");
  ev->add_option("--epochs", ev_cfg.epochs, "classifier epochs");
  ev->add_option("--hidden", ev_cfg.hidden, "classifier hidden size");
  ev->add_option("--seed", ev_seed, "evaluation seed (required)");
  ev->add_option("--policy-a", ev_policy_a, "policy config JSON");
  ev->add_option("--policy-b", ev_policy_b, "policy config JSON");
  ev->add_option("--probes", ev_probes, "probe dataset JSONL");
  ev->add_option("--theta-hat", ev_theta_hat, "estimated ground-truth export");
  ev->add_option("--theta", ev_theta, "reference ground-truth export");
  ev->add_option("--out", ev_out, "write the JSON report here too");

  // inspect
  auto* in = app.add_subcommand("inspect", "summarise a dataset file");
  std::string in_data;
  in->add_option("--data", in_data, "dataset JSONL")->required();

  // project
  auto* pr = app.add_subcommand("project", "2-D PCA projection CSV");
  std::string pr_real, pr_synth, pr_out;
  pr->add_option("--real", pr_real, "real dataset JSONL")->required();
  pr->add_option("--synthetic", pr_synth, "synthetic dataset JSONL")->required();
  pr->add_option("--out", pr_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return run_generate(gen_scenario, gen_n, gen_seed, gen_out, gen_csv,
                          gen_jobs);

    if (tr->parsed()) {
      if (!tr_seed)
        throw dmkit::ConfigError("--seed is required (no ambient randomness)");
      tr_cfg.seed = *tr_seed;
      if (tr_dp_noise >= 0.0 || tr_dp_clip > 0.0) {
        if (tr_dp_clip <= 0.0)
          throw dmkit::ConfigError("--dp-clip must be > 0 when DP is on");
        tr_cfg.dp = dmkit::DpConfig{tr_dp_clip, std::max(tr_dp_noise, 0.0)};
      }
      if (!tr_hyper_path.empty()) tr_hyper = read_json_file(tr_hyper_path);
      return run_train(tr_env, tr_data, tr_hyper, tr_cfg, tr_trainer, tr_out,
                       tr_curve);
    }

    if (ev->parsed()) {
      json report;
      if (ev_metric == "predictive" || ev_metric == "discriminative") {
        if (!ev_seed)
          throw dmkit::ConfigError("--seed is required (no ambient randomness)");
        ev_cfg.seed = *ev_seed;
        BatchDataset synth = dmkit::deserialize_dataset(ev_synth);
        BatchDataset real = dmkit::deserialize_dataset(ev_real);
        dmkit::MetricReport r =
            ev_metric == "predictive"
                ? dmkit::predictive_score(synth, real, ev_target, ev_cfg)
                : dmkit::discriminative_score(synth, real, ev_cfg);
        report = r.to_json();
      } else if (ev_metric == "action-match") {
        BatchDataset probes = dmkit::deserialize_dataset(ev_probes);
        dmkit::PolicySpec a = dmkit::policy_from_json(
            read_json_file(ev_policy_a), probes.schema);
        dmkit::PolicySpec b = dmkit::policy_from_json(
            read_json_file(ev_policy_b), probes.schema);
        dmkit::ActionMatch m = dmkit::action_match(a, b, probes);
        report = {{"metric", "action-match"},
                  {"agreement", m.agreement},
                  {"mean_tv", m.mean_tv}};
      } else if (ev_metric == "ground-truth") {
        dmkit::GroundTruth hat = dmkit::read_ground_truth(ev_theta_hat);
        dmkit::GroundTruth ref = dmkit::read_ground_truth(ev_theta);
        report = dmkit::compare_ground_truth(hat, ref);
        report["metric"] = "ground-truth";
      } else {
        std::cerr << "unknown metric: " << ev_metric << "\n";
        return 2;
      }
      std::cout << report.dump(2) << "\n";
      if (!ev_out.empty()) write_text(ev_out, report.dump(2) + "\n");
      return 0;
    }

    if (in->parsed()) return run_inspect(in_data);

    if (pr->parsed()) {
      BatchDataset real = dmkit::deserialize_dataset(pr_real);
      BatchDataset synth = dmkit::deserialize_dataset(pr_synth);
      size_t rows = dmkit::project2d(real, synth, pr_out);
      std::cout << "wrote " << rows << " points to " << pr_out << "\n";
      return 0;
    }
  } catch (const dmkit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dmkit::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
