// Command-line entry point: dataset generation, single-method training,
// checkpoint evaluation, hyperparameter sweeps, experiment orchestration,
// and report emission.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "jttm/dataset.hpp"
#include "jttm/eval.hpp"
#include "jttm/experiment.hpp"
#include "jttm/model.hpp"
#include "jttm/trainer.hpp"

namespace fs = std::filesystem;

namespace {

// Parses repeatable NAME=INDEX mappings into a label map.
std::optional<std::map<std::string, int>> parse_label_map(const std::vector<std::string>& entries) {
  if (entries.empty()) return std::nullopt;
  std::map<std::string, int> map;
  for (const std::string& entry : entries) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("label map entry '" + entry + "' is not NAME=INDEX");
    }
    map[entry.substr(0, eq)] = std::stoi(entry.substr(eq + 1));
  }
  return map;
}

void print_group_report(const jttm::GroupReport& report, const std::vector<std::string>& names) {
  std::printf("%-20s %10s %10s %10s\n", "group", "correct", "total", "accuracy");
  for (const auto& [key, stats] : report.per_group) {
    if (stats.total == 0) continue;
    const std::string label = key.label < static_cast<int>(names.size())
                                  ? names[static_cast<std::size_t>(key.label)]
                                  : std::to_string(key.label);
    const std::string group = "[" + label + ", " + (key.attribute ? "attr" : "no-attr") + "]";
    std::printf("%-20s %10lld %10lld %10.4f\n", group.c_str(),
                static_cast<long long>(stats.correct), static_cast<long long>(stats.total),
                stats.accuracy);
  }
  std::printf("average %.4f  worst %.4f ([%d, %d])\n", report.average_accuracy,
              report.worst_accuracy, report.worst_group.label, report.worst_group.attribute);
}

struct TrainFlags {
  int epochs = 2;
  int batch_size = 32;
  double learning_rate = 1e-2;
  double weight_decay = 0.0;
  std::string grad_clip = "1.0";
  std::string lr_schedule = "linear_decay";
  std::vector<int> hidden_dims{16};
  std::optional<double> lambda_up;
  std::optional<int> df;
  double alpha = 0.001;
  bool compare_unsquared = false;
  bool continue_stage2 = false;
};

void add_train_flags(CLI::App& cmd, TrainFlags& flags) {
  cmd.add_option("--epochs", flags.epochs, "Training epochs");
  cmd.add_option("--batch-size", flags.batch_size, "Minibatch size");
  cmd.add_option("--learning-rate", flags.learning_rate, "Initial learning rate");
  cmd.add_option("--weight-decay", flags.weight_decay, "Decoupled weight decay");
  cmd.add_option("--grad-clip", flags.grad_clip, "Gradient norm clip value, or 'none'");
  cmd.add_option("--lr-schedule", flags.lr_schedule, "constant or linear_decay")
      ->check(CLI::IsMember({"constant", "linear_decay"}));
  cmd.add_option("--hidden", flags.hidden_dims, "Hidden layer widths");
  cmd.add_option("--lambda-up", flags.lambda_up, "Upweight factor for the error set");
  cmd.add_option("--df", flags.df, "Degrees of freedom of the chi-squared filter");
  cmd.add_option("--alpha", flags.alpha, "Critical value of the chi-squared filter");
  cmd.add_flag("--compare-unsquared", flags.compare_unsquared,
               "Compare the unsquared distance against the chi-squared distribution");
  cmd.add_flag("--continue-stage2", flags.continue_stage2,
               "Continue stage 2 from stage-1 weights instead of re-initializing");
}

jttm::TrainConfig config_from_flags(const TrainFlags& flags, jttm::Method method,
                                    std::uint64_t seed) {
  jttm::TrainConfig config;
  config.epochs = flags.epochs;
  config.batch_size = flags.batch_size;
  config.learning_rate = flags.learning_rate;
  config.weight_decay = flags.weight_decay;
  if (flags.grad_clip == "none") config.grad_clip = std::nullopt;
  else config.grad_clip = std::stod(flags.grad_clip);
  config.lr_schedule = flags.lr_schedule == "constant" ? jttm::LrSchedule::constant
                                                       : jttm::LrSchedule::linear_decay;
  config.hidden_dims = flags.hidden_dims;
  config.alpha = flags.alpha;
  config.squared_statistic = !flags.compare_unsquared;
  config.reinit_stage2 = !flags.continue_stage2;
  config.seed = seed;
  if (method != jttm::Method::erm) {
    if (!flags.lambda_up || !flags.df) {
      throw CLI::ValidationError(
          "train", "--lambda-up and --df are required for upweighting methods "
                   "(run a sweep or state the transferred values)");
    }
  }
  if (flags.lambda_up) config.lambda_up = *flags.lambda_up;
  if (flags.df) config.df = *flags.df;
  return config;
}

int run_generate(const std::string& spec_path, const std::string& preset,
                 const std::string& split, double label_noise, std::uint64_t seed,
                 const std::string& out_path) {
  jttm::SyntheticSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw std::runtime_error("cannot open spec " + spec_path);
    nlohmann::json j;
    in >> j;
    spec = jttm::synthetic_spec_from_json(j);
  } else if (preset == "skewed3x2") {
    spec = jttm::skewed_benchmark_spec(split, seed, label_noise);
  } else {
    throw std::runtime_error("generate: either --spec or --preset is required");
  }
  const jttm::Dataset dataset = jttm::generate_synthetic(spec, split);
  jttm::save_dataset(dataset, out_path);
  std::printf("wrote %zu examples (%d classes, d=%d) to %s\n", dataset.size(),
              dataset.num_classes, dataset.feature_dim, out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage reweighted training with Mahalanobis error-set pruning"};
  app.require_subcommand(1);

  // generate
  auto* generate = app.add_subcommand("generate", "Generate a synthetic dataset file");
  std::string gen_spec, gen_preset, gen_split = "train", gen_out;
  double gen_noise = 0.0;
  std::uint64_t gen_seed = 0;
  generate->add_option("--spec", gen_spec, "Generator spec JSON file");
  generate->add_option("--preset", gen_preset, "Built-in generator preset")
      ->check(CLI::IsMember({"skewed3x2"}));
  generate->add_option("--split", gen_split, "Split tag (train/dev/test)")
      ->check(CLI::IsMember({"train", "dev", "test"}));
  generate->add_option("--label-noise", gen_noise, "Label noise rate in [0,1)");
  generate->add_option("--seed", gen_seed, "Generator seed");
  generate->add_option("--out", gen_out, "Output dataset path")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train one method with one seed");
  std::string train_data, train_method = "erm", train_out = "runs", train_test, train_dev;
  std::vector<std::string> train_label_map;
  std::uint64_t train_seed = 0;
  TrainFlags train_flags;
  train_cmd->add_option("--train", train_data, "Training dataset")->required();
  train_cmd->add_option("--label-map", train_label_map,
                        "Label string mapping, repeatable NAME=INDEX entries");
  train_cmd->add_option("--test", train_test, "Optional test dataset to evaluate");
  train_cmd->add_option("--dev", train_dev, "Optional dev dataset to evaluate");
  train_cmd->add_option("--method", train_method, "erm, jtt, or jtt_m")
      ->check(CLI::IsMember({"erm", "jtt", "jtt_m"}));
  train_cmd->add_option("--seed", train_seed, "Run seed");
  train_cmd->add_option("--out", train_out, "Output directory");
  add_train_flags(*train_cmd, train_flags);

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint against a dataset");
  std::string eval_checkpoint, eval_data, eval_csv;
  std::vector<std::string> eval_label_map;
  evaluate_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint path")->required();
  evaluate_cmd->add_option("--data", eval_data, "Dataset path")->required();
  evaluate_cmd->add_option("--csv", eval_csv, "Optional group CSV output path");
  evaluate_cmd->add_option("--label-map", eval_label_map,
                           "Label string mapping, repeatable NAME=INDEX entries");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid-search (df, lambda_up) on the dev split");
  std::string sweep_config;
  sweep_cmd->add_option("--config", sweep_config, "Experiment config file")->required();

  // experiment
  auto* experiment_cmd = app.add_subcommand("experiment", "Run every (method, seed) pair and report");
  std::string experiment_config;
  experiment_cmd->add_option("--config", experiment_config, "Experiment config file")->required();

  // report
  auto* report_cmd = app.add_subcommand("report", "Re-emit reports from a results directory");
  std::string report_dir;
  report_cmd->add_option("--dir", report_dir, "Results directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) {
      return run_generate(gen_spec, gen_preset, gen_split, gen_noise, gen_seed, gen_out);
    }
    if (*train_cmd) {
      const jttm::Method method = jttm::method_from_string(train_method);
      const jttm::TrainConfig config = config_from_flags(train_flags, method, train_seed);
      jttm::ExperimentData data;
      jttm::LoadOptions options;
      options.label_map = parse_label_map(train_label_map);
      options.split_tag = "train";
      data.train = jttm::load_dataset(train_data, options);
      if (!train_test.empty()) {
        options.split_tag = "test";
        options.num_classes = data.train.num_classes;
        data.test = jttm::load_dataset(train_test, options);
      }
      if (!train_dev.empty()) {
        options.split_tag = "dev";
        options.num_classes = data.train.num_classes;
        data.dev = jttm::load_dataset(train_dev, options);
      }
      const fs::path out_dir(train_out);
      const fs::path run_dir = out_dir / train_method / ("seed_" + std::to_string(train_seed));
      if (data.test) {
        const jttm::RunRecord record = jttm::detail::execute_run(
            method, train_seed, data, config, out_dir, run_dir);
        print_group_report(record.test_report, data.train.label_names);
      } else {
        // No evaluation split: train and checkpoint only.
        fs::create_directories(run_dir);
        jttm::TrainConfig seeded = config;
        seeded.seed = train_seed;
        const jttm::TrainedModel model = jttm::train(method, data.train, seeded);
        jttm::save_params(model.params, run_dir / "checkpoint.jsonl");
        std::printf("trained %s (|E| = %zu, removed = %zu); checkpoint at %s\n",
                    train_method.c_str(), model.provenance.error_set_size,
                    model.provenance.removed_outliers,
                    (run_dir / "checkpoint.jsonl").c_str());
      }
      return 0;
    }
    if (*evaluate_cmd) {
      const jttm::MlpParams params = jttm::load_params(eval_checkpoint);
      jttm::LoadOptions options;
      options.label_map = parse_label_map(eval_label_map);
      const jttm::Dataset dataset = jttm::load_dataset(eval_data, options);
      const jttm::GroupReport report = jttm::evaluate_groups(params, dataset);
      print_group_report(report, dataset.label_names);
      if (!eval_csv.empty()) jttm::detail::write_group_csv(report, eval_csv);
      return 0;
    }
    if (*sweep_cmd) {
      const jttm::ExperimentConfig config = jttm::parse_experiment_config_file(sweep_config);
      const jttm::SweepResult result = jttm::run_sweep(config);
      std::printf("selected df=%d lambda_up=%g (results in %s)\n", result.selected_df,
                  result.selected_lambda_up, result.out_dir.c_str());
      return 0;
    }
    if (*experiment_cmd) {
      const jttm::ExperimentConfig config = jttm::parse_experiment_config_file(experiment_config);
      const jttm::ExperimentResult result = jttm::run_experiment(config);
      for (const std::string& error : result.errors) {
        std::fprintf(stderr, "run failed: %s\n", error.c_str());
      }
      if (result.ok) {
        std::printf("report written to %s\n", (result.out_dir / "report.md").c_str());
      }
      return result.ok ? 0 : 1;
    }
    if (*report_cmd) {
      jttm::emit_report(report_dir);
      std::printf("report written to %s\n", (fs::path(report_dir) / "report.md").c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
