#pragma once

// Experiment orchestration: a strict key=value config, per-(method, seed)
// runs with manifests and checkpoints on disk, a (df, lambda_up) grid sweep
// selected on dev worst-group accuracy, and report emission. Reports are
// derived purely from run records, so identical configs reproduce identical
// report bytes.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "jttm/dataset.hpp"
#include "jttm/eval.hpp"
#include "jttm/model.hpp"
#include "jttm/ood.hpp"
#include "jttm/trainer.hpp"

namespace jttm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

struct ExperimentConfig {
  // Dataset source: either a synthetic spec file (JSON object with one
  // generator spec per split) or per-split record files.
  std::optional<std::string> synthetic_spec_path;
  std::optional<std::string> train_path;
  std::optional<std::string> dev_path;
  std::optional<std::string> test_path;

  std::vector<Method> methods;
  std::vector<std::uint64_t> seeds;
  std::string out_dir = "runs";
  int workers = 1;
  TrainConfig base;
  bool lambda_up_explicit = false;
  bool df_explicit = false;
  std::optional<GroupKey> focal_group;
  std::vector<int> sweep_df;
  std::vector<double> sweep_lambda_up;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string current;
  std::istringstream in(s);
  while (std::getline(in, current, sep)) parts.push_back(trim(current));
  return parts;
}

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: key '" + key + "' expects true or false");
}

inline GroupKey parse_group_key(const std::string& value) {
  const auto parts = split(value, ':');
  if (parts.size() != 2) throw std::invalid_argument("config: group key expects label:attribute");
  return GroupKey{std::stoi(parts[0]), std::stoi(parts[1])};
}

}  // namespace detail

// Parses the plain-text key = value config document. Unknown keys are
// errors, not warnings.
inline ExperimentConfig parse_experiment_config(std::istream& in) {
  ExperimentConfig config;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(line_number) +
                                  ": expected key = value");
    }
    const std::string key = detail::trim(stripped.substr(0, eq));
    const std::string value = detail::trim(stripped.substr(eq + 1));
    const auto fail = [&](const std::string& message) -> std::invalid_argument {
      return std::invalid_argument("config: line " + std::to_string(line_number) + ": " + message);
    };
    try {
      if (key == "dataset.synthetic") config.synthetic_spec_path = value;
      else if (key == "dataset.train") config.train_path = value;
      else if (key == "dataset.dev") config.dev_path = value;
      else if (key == "dataset.test") config.test_path = value;
      else if (key == "methods") {
        config.methods.clear();
        for (const std::string& m : detail::split(value, ',')) {
          config.methods.push_back(method_from_string(m));
        }
      } else if (key == "seeds") {
        config.seeds.clear();
        for (const std::string& s : detail::split(value, ',')) {
          config.seeds.push_back(std::stoull(s));
        }
      } else if (key == "out_dir") config.out_dir = value;
      else if (key == "workers") config.workers = std::stoi(value);
      else if (key == "epochs") config.base.epochs = std::stoi(value);
      else if (key == "batch_size") config.base.batch_size = std::stoi(value);
      else if (key == "learning_rate") config.base.learning_rate = std::stod(value);
      else if (key == "weight_decay") config.base.weight_decay = std::stod(value);
      else if (key == "grad_clip") {
        if (value == "none") config.base.grad_clip = std::nullopt;
        else config.base.grad_clip = std::stod(value);
      } else if (key == "lr_schedule") {
        if (value == "constant") config.base.lr_schedule = LrSchedule::constant;
        else if (value == "linear_decay") config.base.lr_schedule = LrSchedule::linear_decay;
        else throw fail("lr_schedule must be constant or linear_decay");
      } else if (key == "hidden_dims") {
        config.base.hidden_dims.clear();
        for (const std::string& h : detail::split(value, ',')) {
          config.base.hidden_dims.push_back(std::stoi(h));
        }
      } else if (key == "lambda_up") {
        config.base.lambda_up = std::stod(value);
        config.lambda_up_explicit = true;
      } else if (key == "df") {
        config.base.df = std::stoi(value);
        config.df_explicit = true;
      } else if (key == "alpha") config.base.alpha = std::stod(value);
      else if (key == "squared_statistic") config.base.squared_statistic = detail::parse_bool(value, key);
      else if (key == "reinit_stage2") config.base.reinit_stage2 = detail::parse_bool(value, key);
      else if (key == "focal_group") config.focal_group = detail::parse_group_key(value);
      else if (key == "sweep.df") {
        config.sweep_df.clear();
        for (const std::string& d : detail::split(value, ',')) config.sweep_df.push_back(std::stoi(d));
      } else if (key == "sweep.lambda_up") {
        config.sweep_lambda_up.clear();
        for (const std::string& l : detail::split(value, ',')) {
          config.sweep_lambda_up.push_back(std::stod(l));
        }
      } else {
        throw fail("unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception& e) {
      throw fail(std::string("bad value: ") + e.what());
    }
  }
  return config;
}

inline ExperimentConfig parse_experiment_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  return parse_experiment_config(in);
}

inline void validate(const ExperimentConfig& config) {
  if (config.methods.empty()) throw std::invalid_argument("config: methods must be nonempty");
  if (config.seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
  std::set<std::uint64_t> distinct(config.seeds.begin(), config.seeds.end());
  if (distinct.size() != config.seeds.size()) {
    throw std::invalid_argument("config: seeds must be distinct");
  }
  if (config.workers < 1) throw std::invalid_argument("config: workers must be positive");
  validate(config.base);
  const bool needs_upweighting = std::any_of(config.methods.begin(), config.methods.end(),
                                             [](Method m) { return m != Method::erm; });
  if (needs_upweighting && (!config.lambda_up_explicit || !config.df_explicit)) {
    throw std::invalid_argument(
        "config: lambda_up and df must be set explicitly for upweighting methods "
        "(run a sweep or state the transferred values)");
  }
}

// ---------------------------------------------------------------------------
// Dataset loading

struct ExperimentData {
  Dataset train;
  std::optional<Dataset> dev;
  std::optional<Dataset> test;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& config) {
  ExperimentData data;
  if (config.synthetic_spec_path) {
    std::ifstream in(*config.synthetic_spec_path);
    if (!in) throw std::runtime_error("cannot open synthetic spec " + *config.synthetic_spec_path);
    nlohmann::json j;
    in >> j;
    if (!j.contains("train")) throw std::runtime_error("synthetic spec: missing 'train' entry");
    data.train = generate_synthetic(synthetic_spec_from_json(j["train"]), "train");
    if (j.contains("dev")) data.dev = generate_synthetic(synthetic_spec_from_json(j["dev"]), "dev");
    if (j.contains("test")) data.test = generate_synthetic(synthetic_spec_from_json(j["test"]), "test");
    return data;
  }
  if (!config.train_path) throw std::invalid_argument("config: no dataset source given");
  LoadOptions options;
  options.split_tag = "train";
  data.train = load_dataset(*config.train_path, options);
  if (config.dev_path) {
    options.split_tag = "dev";
    options.num_classes = data.train.num_classes;
    data.dev = load_dataset(*config.dev_path, options);
  }
  if (config.test_path) {
    options.split_tag = "test";
    options.num_classes = data.train.num_classes;
    data.test = load_dataset(*config.test_path, options);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Serialization helpers

namespace detail {

inline std::string format_double(double v) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.17g", v);
  return buffer;
}

inline std::string format_percent(double v) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.1f", 100.0 * v);
  return buffer;
}

inline nlohmann::json config_to_json(const TrainConfig& config) {
  nlohmann::json j;
  j["epochs"] = config.epochs;
  j["batch_size"] = config.batch_size;
  j["learning_rate"] = config.learning_rate;
  j["hidden_dims"] = config.hidden_dims;
  j["optimizer_stage1"] = config.optimizer_stage1 == OptimizerKind::sgd ? "sgd" : "adamw";
  j["optimizer_stage2"] = config.optimizer_stage2 == OptimizerKind::sgd ? "sgd" : "adamw";
  j["weight_decay"] = config.weight_decay;
  if (config.grad_clip) j["grad_clip"] = *config.grad_clip;
  else j["grad_clip"] = nullptr;
  j["lr_schedule"] = config.lr_schedule == LrSchedule::constant ? "constant" : "linear_decay";
  j["lambda_up"] = config.lambda_up;
  j["df"] = config.df;
  j["alpha"] = config.alpha;
  j["squared_statistic"] = config.squared_statistic;
  j["reinit_stage2"] = config.reinit_stage2;
  j["seed"] = config.seed;
  return j;
}

inline std::string group_label(const GroupKey& key, const std::vector<std::string>& names) {
  const std::string name = key.label < static_cast<int>(names.size()) && !names.empty()
                               ? names[static_cast<std::size_t>(key.label)]
                               : std::to_string(key.label);
  return "[" + name + ", " + (key.attribute ? "attr" : "no-attr") + "]";
}

inline void write_group_csv(const GroupReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "label,attribute,correct,total,accuracy\n";
  for (const auto& [key, stats] : report.per_group) {
    out << key.label << ',' << key.attribute << ',' << stats.correct << ',' << stats.total << ','
        << format_double(stats.accuracy) << '\n';
  }
}

inline void write_ood_fraction_csv(const std::map<GroupKey, std::optional<double>>& fractions,
                                   const ErrorSet& errors, const OodPartition& partition,
                                   const Dataset& train, const fs::path& path) {
  std::map<GroupKey, std::int64_t> error_counts;
  std::map<GroupKey, std::int64_t> ood_counts;
  for (const Example& ex : train.examples) {
    if (!errors.contains(ex.id)) continue;
    const GroupKey key{ex.label, ex.attribute};
    ++error_counts[key];
    if (std::binary_search(partition.s_out.begin(), partition.s_out.end(), ex.id)) ++ood_counts[key];
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "label,attribute,errors,ood,fraction\n";
  for (const auto& [key, fraction] : fractions) {
    out << key.label << ',' << key.attribute << ',' << error_counts[key] << ',' << ood_counts[key]
        << ',';
    if (fraction) out << format_double(*fraction);
    out << '\n';
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Runs

struct RunRecord {
  Method method = Method::erm;
  std::uint64_t seed = 0;
  std::size_t error_set_size = 0;
  std::size_t removed_outliers = 0;
  GroupReport test_report;
  std::optional<GroupReport> dev_report;
};

namespace detail {

// Trains and evaluates one (method, seed) job and writes its artifacts under
// run_dir. The manifest is a single JSON record.
inline RunRecord execute_run(Method method, std::uint64_t seed, const ExperimentData& data,
                             const TrainConfig& base, const fs::path& out_dir,
                             const fs::path& run_dir) {
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(run_dir);
  TrainConfig config = base;
  config.seed = seed;
  const TrainedModel model = train(method, data.train, config);
  if (!data.test) throw std::runtime_error("run: no test split to evaluate");

  RunRecord record;
  record.method = method;
  record.seed = seed;
  record.error_set_size = model.provenance.error_set_size;
  record.removed_outliers = model.provenance.removed_outliers;
  record.test_report = evaluate_groups(model, *data.test);
  write_group_csv(record.test_report, run_dir / "groups_test.csv");
  if (data.dev) {
    record.dev_report = evaluate_groups(model, *data.dev);
    write_group_csv(*record.dev_report, run_dir / "groups_dev.csv");
  }
  save_params(model.params, run_dir / "checkpoint.jsonl");
  if (model.ood) {
    std::map<std::int64_t, int> labels;
    for (const Example& ex : data.train.examples) labels[ex.id] = ex.label;
    save_scores(*model.ood, labels, run_dir / "ood_scores.jsonl");
    const auto fractions = ood_fraction_per_group(model.error_set, *model.ood, data.train);
    write_ood_fraction_csv(fractions, model.error_set, *model.ood, data.train,
                           run_dir / "ood_fractions.csv");
  }
  const auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - start)
                           .count();
  nlohmann::json manifest;
  manifest["method"] = to_string(method);
  manifest["seed"] = seed;
  manifest["error_set_size"] = record.error_set_size;
  manifest["removed_outliers"] = record.removed_outliers;
  manifest["checkpoint"] = fs::relative(run_dir / "checkpoint.jsonl", out_dir).generic_string();
  manifest["wall_ms"] = wall_ms;
  manifest["config"] = config_to_json(config);
  std::ofstream out(run_dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot open " + (run_dir / "manifest.json").string());
  out << manifest.dump() << '\n';
  return record;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Report emission

struct MethodSummary {
  std::string method;
  std::vector<std::uint64_t> seeds;
  AggregateReport aggregate;
  std::vector<GroupReport> reports;  // seed order
};

struct ReportBundle {
  std::vector<MethodSummary> methods;  // method name order
  std::vector<std::string> label_names;
  std::optional<GroupKey> focal_group;
  // method -> metric (average/worst/focal/group_y_a) -> paired test vs jtt
  std::map<std::string, std::map<std::string, TTestResult>> significance;
};

namespace detail {

struct ScannedRun {
  std::string method;
  std::uint64_t seed = 0;
  fs::path dir;
  nlohmann::json manifest;
};

inline GroupReport read_group_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty group csv " + path.string());
  GroupReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 5) throw std::runtime_error("malformed group csv row in " + path.string());
    const GroupKey key{std::stoi(fields[0]), std::stoi(fields[1])};
    GroupStats stats;
    stats.correct = std::stoll(fields[2]);
    stats.total = std::stoll(fields[3]);
    stats.accuracy = std::stod(fields[4]);
    report.per_group[key] = stats;
  }
  bool first = true;
  for (const auto& [key, stats] : report.per_group) {
    report.total += stats.total;
    report.correct += stats.correct;
    if (stats.total == 0) continue;
    if (first || stats.accuracy < report.worst_accuracy) {
      report.worst_group = key;
      report.worst_accuracy = stats.accuracy;
      first = false;
    }
  }
  report.average_accuracy =
      report.total > 0 ? static_cast<double>(report.correct) / static_cast<double>(report.total) : 0.0;
  return report;
}

inline std::vector<ScannedRun> scan_runs(const fs::path& out_dir) {
  std::vector<ScannedRun> runs;
  if (!fs::exists(out_dir)) throw std::runtime_error("results directory " + out_dir.string() + " does not exist");
  for (const auto& method_entry : fs::directory_iterator(out_dir)) {
    if (!method_entry.is_directory()) continue;
    for (const auto& run_entry : fs::directory_iterator(method_entry.path())) {
      if (!run_entry.is_directory()) continue;
      const fs::path manifest_path = run_entry.path() / "manifest.json";
      if (!fs::exists(manifest_path)) continue;
      std::ifstream in(manifest_path);
      nlohmann::json manifest;
      in >> manifest;
      ScannedRun run;
      run.method = manifest.at("method").get<std::string>();
      run.seed = manifest.at("seed").get<std::uint64_t>();
      run.dir = run_entry.path();
      run.manifest = std::move(manifest);
      runs.push_back(std::move(run));
    }
  }
  std::sort(runs.begin(), runs.end(), [](const ScannedRun& a, const ScannedRun& b) {
    return a.method != b.method ? a.method < b.method : a.seed < b.seed;
  });
  if (runs.empty()) throw std::runtime_error("results directory " + out_dir.string() + " has no runs");
  return runs;
}

struct MetricSeries {
  std::string name;                          // average, worst, focal, group_y_a
  std::map<std::string, std::vector<double>> per_method;  // seed order
};

inline std::string significance_marker(const std::optional<TTestResult>& test) {
  if (!test) return "";
  if (test->degenerate) return "n/a";
  return *test->p < 0.05 ? "*" : "";
}

}  // namespace detail

// Builds aggregate tables from the run records under out_dir and writes
// report.md, aggregate.csv, groups.csv, significance.csv, and
// ood_fractions.csv. Numbers come from the per-run records; nothing is
// recomputed beyond aggregation.
inline ReportBundle emit_report(const fs::path& out_dir) {
  const std::vector<detail::ScannedRun> runs = detail::scan_runs(out_dir);

  ReportBundle bundle;
  if (fs::exists(out_dir / "experiment.json")) {
    std::ifstream in(out_dir / "experiment.json");
    nlohmann::json j;
    in >> j;
    if (j.contains("label_names")) bundle.label_names = j["label_names"].get<std::vector<std::string>>();
    if (j.contains("focal_group")) {
      bundle.focal_group = GroupKey{j["focal_group"][0].get<int>(), j["focal_group"][1].get<int>()};
    }
  }

  // Group rows per method, in seed order.
  std::map<std::string, MethodSummary> summaries;
  {
    std::ofstream groups_csv(out_dir / "groups.csv");
    groups_csv << "method,seed,split,label,attribute,correct,total,accuracy\n";
    for (const detail::ScannedRun& run : runs) {
      MethodSummary& summary = summaries[run.method];
      summary.method = run.method;
      summary.seeds.push_back(run.seed);
      summary.reports.push_back(detail::read_group_csv(run.dir / "groups_test.csv"));
      for (const std::string split : {"test", "dev"}) {
        const fs::path path = run.dir / (std::string("groups_") + split + ".csv");
        if (!fs::exists(path)) continue;
        const GroupReport report = detail::read_group_csv(path);
        for (const auto& [key, stats] : report.per_group) {
          groups_csv << run.method << ',' << run.seed << ',' << split << ',' << key.label << ','
                     << key.attribute << ',' << stats.correct << ',' << stats.total << ','
                     << detail::format_double(stats.accuracy) << '\n';
        }
      }
    }
  }
  for (auto& [name, summary] : summaries) {
    summary.aggregate = aggregate(summary.reports);
    bundle.methods.push_back(summary);
  }

  // Metric series for aggregation and paired tests.
  std::vector<detail::MetricSeries> metrics;
  const auto add_metric = [&](const std::string& name, auto&& extract) {
    detail::MetricSeries series;
    series.name = name;
    for (const auto& [method, summary] : summaries) {
      for (const GroupReport& report : summary.reports) {
        series.per_method[method].push_back(extract(report));
      }
    }
    metrics.push_back(std::move(series));
  };
  add_metric("average", [](const GroupReport& r) { return r.average_accuracy; });
  add_metric("worst", [](const GroupReport& r) { return r.worst_accuracy; });
  if (bundle.focal_group) {
    add_metric("focal", [&](const GroupReport& r) {
      const auto it = r.per_group.find(*bundle.focal_group);
      return it != r.per_group.end() && it->second.total > 0 ? it->second.accuracy : 0.0;
    });
  }
  std::vector<GroupKey> group_keys;
  for (const auto& [key, stats] : summaries.begin()->second.reports.front().per_group) {
    if (stats.total == 0) continue;
    group_keys.push_back(key);
    add_metric("group_" + std::to_string(key.label) + "_" + std::to_string(key.attribute),
               [key](const GroupReport& r) { return r.per_group.at(key).accuracy; });
  }

  // Paired t-tests against the jtt baseline, pairs aligned by seed order.
  const bool have_jtt = summaries.count("jtt") > 0;
  std::map<std::string, std::map<std::string, std::optional<TTestResult>>> significance;
  for (const detail::MetricSeries& series : metrics) {
    for (const auto& [method, values] : series.per_method) {
      if (!have_jtt || method == "jtt") continue;
      const std::vector<double>& baseline = series.per_method.at("jtt");
      if (values.size() != baseline.size() || summaries.at(method).seeds != summaries.at("jtt").seeds) {
        throw std::runtime_error("emit_report: mismatched seed sets for paired comparison");
      }
      if (values.size() < 2) continue;
      significance[method][series.name] = paired_t_test(values, baseline);
    }
  }

  // aggregate.csv
  {
    std::ofstream out(out_dir / "aggregate.csv");
    out << "method,metric,mean,stddev,runs\n";
    for (const detail::MetricSeries& series : metrics) {
      for (const auto& [method, values] : series.per_method) {
        const MeanStd ms = mean_std(values);
        out << method << ',' << series.name << ',' << detail::format_double(ms.mean) << ',';
        if (ms.stddev) out << detail::format_double(*ms.stddev);
        out << ',' << values.size() << '\n';
      }
    }
  }

  // significance.csv
  {
    std::ofstream out(out_dir / "significance.csv");
    out << "method,metric,t,p,marker\n";
    for (const auto& [method, tests] : significance) {
      for (const auto& [metric, test] : tests) {
        out << method << ',' << metric << ',';
        if (test && !test->degenerate) {
          out << detail::format_double(test->t) << ',' << detail::format_double(*test->p);
        } else {
          out << ',';
        }
        out << ',' << detail::significance_marker(test) << '\n';
      }
    }
  }

  // ood_fractions.csv: mean fraction per group across the runs that define it.
  {
    std::ofstream out(out_dir / "ood_fractions.csv");
    out << "method,label,attribute,runs_defined,mean_fraction\n";
    for (const auto& [method, summary] : summaries) {
      std::map<GroupKey, std::vector<double>> fractions;
      bool any = false;
      for (std::size_t i = 0; i < summary.seeds.size(); ++i) {
        const fs::path path = out_dir / method / ("seed_" + std::to_string(summary.seeds[i])) /
                              "ood_fractions.csv";
        if (!fs::exists(path)) continue;
        any = true;
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto fields = detail::split(line, ',');
          if (fields.size() < 5) continue;
          if (fields[4].empty()) continue;
          fractions[GroupKey{std::stoi(fields[0]), std::stoi(fields[1])}].push_back(
              std::stod(fields[4]));
        }
      }
      if (!any) continue;
      for (const GroupKey& key : group_keys) {
        const auto it = fractions.find(key);
        out << method << ',' << key.label << ',' << key.attribute << ','
            << (it == fractions.end() ? 0 : it->second.size()) << ',';
        if (it != fractions.end() && !it->second.empty()) {
          out << detail::format_double(mean_std(it->second).mean);
        }
        out << '\n';
      }
    }
  }

  // report.md
  {
    std::ofstream out(out_dir / "report.md");
    out << "# Experiment report\n\n";
    out << "Accuracies in percent, mean +/- std across seeds. \"*\" marks a paired\n"
           "t-test against jtt with p < 0.05; \"n/a\" marks a degenerate\n"
           "(zero-variance) comparison.\n\n";

    const auto cell = [&](const std::string& method, const std::string& metric,
                          const std::vector<double>& values) {
      const MeanStd ms = mean_std(values);
      std::string text = detail::format_percent(ms.mean);
      if (ms.stddev) text += " +/- " + detail::format_percent(*ms.stddev);
      if (method != "jtt" && have_jtt) {
        const auto method_it = significance.find(method);
        if (method_it != significance.end()) {
          const auto metric_it = method_it->second.find(metric);
          if (metric_it != method_it->second.end()) {
            const std::string marker = detail::significance_marker(metric_it->second);
            if (marker == "*") text += "*";
            else if (marker == "n/a") text += " (n/a)";
          }
        }
      }
      return text;
    };
    const auto series_for = [&](const std::string& name) -> const detail::MetricSeries& {
      for (const detail::MetricSeries& series : metrics) {
        if (series.name == name) return series;
      }
      throw std::logic_error("missing metric " + name);
    };

    out << "## Average and worst-group accuracy\n\n";
    out << "| Method | Avg (%) | Worst (%) |";
    if (bundle.focal_group) {
      out << " Focal " << detail::group_label(*bundle.focal_group, bundle.label_names) << " (%) |";
    }
    out << "\n|---|---|---|";
    if (bundle.focal_group) out << "---|";
    out << "\n";
    for (const auto& [method, summary] : summaries) {
      out << "| " << method << " | " << cell(method, "average", series_for("average").per_method.at(method))
          << " | " << cell(method, "worst", series_for("worst").per_method.at(method)) << " |";
      if (bundle.focal_group) {
        out << " " << cell(method, "focal", series_for("focal").per_method.at(method)) << " |";
      }
      out << "\n";
    }

    out << "\n## Per-group accuracy\n\n| Group |";
    for (const auto& [method, summary] : summaries) out << " " << method << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < summaries.size(); ++i) out << "---|";
    out << "\n";
    for (const GroupKey& key : group_keys) {
      const std::string metric = "group_" + std::to_string(key.label) + "_" +
                                 std::to_string(key.attribute);
      out << "| " << detail::group_label(key, bundle.label_names) << " |";
      for (const auto& [method, summary] : summaries) {
        out << " " << cell(method, metric, series_for(metric).per_method.at(method)) << " |";
      }
      out << "\n";
    }

    // OOD-composition table: one fraction per group, for methods that prune.
    for (const auto& [method, summary] : summaries) {
      std::map<GroupKey, std::vector<double>> fractions;
      std::map<GroupKey, bool> seen;
      bool any = false;
      for (const std::uint64_t seed : summary.seeds) {
        const fs::path path = out_dir / method / ("seed_" + std::to_string(seed)) /
                              "ood_fractions.csv";
        if (!fs::exists(path)) continue;
        any = true;
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto fields = detail::split(line, ',');
          if (fields.size() < 5) continue;
          const GroupKey key{std::stoi(fields[0]), std::stoi(fields[1])};
          seen[key] = true;
          if (!fields[4].empty()) fractions[key].push_back(std::stod(fields[4]));
        }
      }
      if (!any) continue;
      out << "\n## OOD fraction of the error set per group (" << method << ")\n\n";
      out << "| Group | Fraction (%) |\n|---|---|\n";
      for (const GroupKey& key : group_keys) {
        out << "| " << detail::group_label(key, bundle.label_names) << " | ";
        const auto it = fractions.find(key);
        if (it != fractions.end() && !it->second.empty()) {
          out << detail::format_percent(mean_std(it->second).mean);
        } else {
          out << "n/a";
        }
        out << " |\n";
      }
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct ExperimentResult {
  bool ok = true;
  fs::path out_dir;
  ReportBundle report;
  std::vector<std::string> errors;
};

namespace detail {

inline int effective_workers(const ExperimentConfig& config) {
  if (const char* env = std::getenv("JTTM_WORKERS")) return std::max(1, std::atoi(env));
  return std::max(1, config.workers);
}

inline fs::path effective_out_dir(const ExperimentConfig& config) {
  if (const char* env = std::getenv("JTTM_OUT_DIR")) return fs::path(env);
  return fs::path(config.out_dir);
}

struct JobError {
  std::string method;
  std::uint64_t seed;
  std::string message;
};

// Runs the (method, seed) grid with a fixed-size worker pool. Jobs are
// isolated in their own directories; failures are recorded and do not stop
// other jobs.
inline std::vector<JobError> run_jobs(const std::vector<Method>& methods,
                                      const std::vector<std::uint64_t>& seeds,
                                      const ExperimentData& data, const TrainConfig& base,
                                      const fs::path& out_dir, int workers) {
  struct Job {
    Method method;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const Method method : methods) {
    for (const std::uint64_t seed : seeds) jobs.push_back({method, seed});
  }
  std::vector<std::optional<JobError>> failures(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job& job = jobs[i];
      const fs::path run_dir =
          out_dir / to_string(job.method) / ("seed_" + std::to_string(job.seed));
      try {
        execute_run(job.method, job.seed, data, base, out_dir, run_dir);
      } catch (const std::exception& e) {
        failures[i] = JobError{to_string(job.method), job.seed, e.what()};
      }
    }
  };
  const int pool_size = std::min<int>(workers, static_cast<int>(jobs.size()));
  std::vector<std::thread> pool;
  for (int i = 0; i < pool_size; ++i) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::vector<JobError> errors;
  for (const auto& failure : failures) {
    if (failure) errors.push_back(*failure);
  }
  return errors;
}

inline void write_job_errors(const std::vector<JobError>& errors, const fs::path& out_dir) {
  if (errors.empty()) return;
  std::ofstream out(out_dir / "errors.jsonl");
  for (const JobError& e : errors) {
    nlohmann::json j;
    j["method"] = e.method;
    j["seed"] = e.seed;
    j["error"] = e.message;
    out << j.dump() << '\n';
  }
}

}  // namespace detail

// Trains every (method, seed) pair, evaluates on test (and dev when
// present), writes manifests, checkpoints, and group rows, then emits the
// aggregate report. Partial results are preserved on failure.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
  validate(config);
  const fs::path out_dir = detail::effective_out_dir(config);
  fs::create_directories(out_dir);
  const ExperimentData data = load_experiment_data(config);
  if (!data.test) throw std::invalid_argument("run_experiment: a test split is required");

  {
    nlohmann::json meta;
    if (!data.train.label_names.empty()) meta["label_names"] = data.train.label_names;
    if (config.focal_group) {
      meta["focal_group"] = {config.focal_group->label, config.focal_group->attribute};
    }
    nlohmann::json method_names = nlohmann::json::array();
    for (const Method m : config.methods) method_names.push_back(to_string(m));
    meta["methods"] = method_names;
    meta["seeds"] = config.seeds;
    std::ofstream out(out_dir / "experiment.json");
    out << meta.dump() << '\n';
  }

  ExperimentResult result;
  result.out_dir = out_dir;
  const std::vector<detail::JobError> errors = detail::run_jobs(
      config.methods, config.seeds, data, config.base, out_dir, detail::effective_workers(config));
  detail::write_job_errors(errors, out_dir);
  for (const detail::JobError& e : errors) {
    result.errors.push_back(e.method + " seed " + std::to_string(e.seed) + ": " + e.message);
  }
  result.ok = errors.empty();
  if (errors.size() < config.methods.size() * config.seeds.size()) {
    result.report = emit_report(out_dir);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepPoint {
  int df = 0;
  double lambda_up = 0.0;
  std::vector<double> dev_worst;  // seed order
  double mean_dev_worst = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;  // grid order (df asc, lambda asc)
  int selected_df = 0;
  double selected_lambda_up = 0.0;
  fs::path out_dir;
};

// Argmax of mean dev worst-group accuracy; ties prefer smaller lambda_up,
// then smaller df.
inline const SweepPoint& select_sweep_point(const std::vector<SweepPoint>& points) {
  if (points.empty()) throw std::invalid_argument("select_sweep_point: empty grid");
  const SweepPoint* best = nullptr;
  for (const SweepPoint& point : points) {
    if (!best || point.mean_dev_worst > best->mean_dev_worst ||
        (point.mean_dev_worst == best->mean_dev_worst &&
         (point.lambda_up < best->lambda_up ||
          (point.lambda_up == best->lambda_up && point.df < best->df)))) {
      best = &point;
    }
  }
  return *best;
}

// Trains the outlier-pruned method per (df, lambda_up) grid point per seed,
// selects the point maximizing mean dev worst-group accuracy (ties prefer
// smaller lambda_up, then smaller df), and re-runs the selected point on the
// test split under out_dir/selected.
inline SweepResult run_sweep(const ExperimentConfig& config) {
  if (config.sweep_df.empty() || config.sweep_lambda_up.empty()) {
    throw std::invalid_argument("run_sweep: sweep.df and sweep.lambda_up must be nonempty");
  }
  if (config.seeds.empty()) throw std::invalid_argument("run_sweep: seeds must be nonempty");
  validate(config.base);
  const fs::path out_dir = detail::effective_out_dir(config);
  fs::create_directories(out_dir);
  const ExperimentData data = load_experiment_data(config);
  if (!data.dev) throw std::invalid_argument("run_sweep: a dev split is required");
  if (!data.test) throw std::invalid_argument("run_sweep: a test split is required");

  std::vector<int> grid_df = config.sweep_df;
  std::sort(grid_df.begin(), grid_df.end());
  std::vector<double> grid_lambda = config.sweep_lambda_up;
  std::sort(grid_lambda.begin(), grid_lambda.end());

  // Stage-1 artifacts are independent of (df, lambda_up); compute them once
  // per seed. Partitions depend on df only.
  struct SeedCache {
    MlpParams stage1;
    ErrorSet errors;
    std::vector<FeaturePoint> points;
    std::vector<ClassGaussian> gaussians;
    std::map<int, OodPartition> partition_by_df;
  };
  std::map<std::uint64_t, SeedCache> caches;
  for (const std::uint64_t seed : config.seeds) {
    TrainConfig tc = config.base;
    tc.seed = seed;
    SeedCache cache;
    cache.stage1 = detail::train_stage1(data.train, tc);
    cache.errors = collect_error_set(cache.stage1, data.train);
    cache.points = penultimate_features(cache.stage1, data.train);
    cache.gaussians = fit_class_gaussians(cache.points);
    for (const int df : grid_df) {
      cache.partition_by_df[df] =
          partition_ood(cache.points, cache.gaussians, df, tc.alpha,
                        OodOptions{tc.squared_statistic, true});
    }
    caches.emplace(seed, std::move(cache));
  }

  SweepResult result;
  result.out_dir = out_dir;
  std::ofstream rows(out_dir / "sweep.csv");
  rows << "df,lambda_up,seed,dev_worst_accuracy\n";
  for (const int df : grid_df) {
    for (const double lambda : grid_lambda) {
      SweepPoint point;
      point.df = df;
      point.lambda_up = lambda;
      for (const std::uint64_t seed : config.seeds) {
        TrainConfig tc = config.base;
        tc.seed = seed;
        tc.df = df;
        tc.lambda_up = lambda;
        const SeedCache& cache = caches.at(seed);
        const ErrorSet kept = prune_error_set(cache.errors, cache.partition_by_df.at(df));
        const MlpParams params = detail::train_stage2(data.train, kept, tc, &cache.stage1);
        const GroupReport report = evaluate_groups(params, *data.dev);
        point.dev_worst.push_back(report.worst_accuracy);
        rows << df << ',' << detail::format_double(lambda) << ',' << seed << ','
             << detail::format_double(report.worst_accuracy) << '\n';
      }
      point.mean_dev_worst = mean_std(point.dev_worst).mean;
      result.points.push_back(std::move(point));
    }
  }

  const SweepPoint* best = &select_sweep_point(result.points);
  result.selected_df = best->df;
  result.selected_lambda_up = best->lambda_up;
  {
    nlohmann::json j;
    j["df"] = best->df;
    j["lambda_up"] = best->lambda_up;
    j["mean_dev_worst_accuracy"] = best->mean_dev_worst;
    std::ofstream out(out_dir / "sweep_selected.json");
    out << j.dump() << '\n';
  }

  // Re-run the selected point on the test split.
  TrainConfig selected = config.base;
  selected.df = best->df;
  selected.lambda_up = best->lambda_up;
  const fs::path selected_dir = out_dir / "selected";
  fs::create_directories(selected_dir);
  const std::vector<detail::JobError> errors =
      detail::run_jobs({Method::jtt_m}, config.seeds, data, selected, selected_dir,
                       detail::effective_workers(config));
  detail::write_job_errors(errors, selected_dir);
  if (!errors.empty()) {
    throw std::runtime_error("run_sweep: selected-point rerun failed: " + errors.front().message);
  }
  emit_report(selected_dir);
  return result;
}

}  // namespace jttm
