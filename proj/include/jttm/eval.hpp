#pragma once

// Group-wise accuracy evaluation, cross-seed aggregation, the paired t-test,
// and the per-group OOD-composition breakdown of an error set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "jttm/dataset.hpp"
#include "jttm/model.hpp"
#include "jttm/ood.hpp"
#include "jttm/special.hpp"
#include "jttm/trainer.hpp"

namespace jttm {

struct GroupStats {
  std::int64_t correct = 0;
  std::int64_t total = 0;
  double accuracy = 0.0;
};

struct GroupReport {
  std::map<GroupKey, GroupStats> per_group;
  double average_accuracy = 0.0;
  GroupKey worst_group;
  double worst_accuracy = 0.0;
  std::int64_t total = 0;
  std::int64_t correct = 0;
};

// Accuracy per nonempty group. Empty groups are kept in per_group with total
// zero but excluded from the worst-group minimum; ties in the minimum break
// by (label, attribute) order.
inline GroupReport evaluate_groups(const MlpParams& params, const Dataset& dataset) {
  if (dataset.examples.empty()) throw std::invalid_argument("evaluate_groups: empty dataset");
  GroupReport report;
  for (int y = 0; y < dataset.num_classes; ++y) {
    for (int a = 0; a < 2; ++a) report.per_group[GroupKey{y, a}];
  }
  for (const Example& ex : dataset.examples) {
    GroupStats& stats = report.per_group[GroupKey{ex.label, ex.attribute}];
    ++stats.total;
    if (predict(params, ex.features) == ex.label) ++stats.correct;
  }
  bool first = true;
  for (auto& [key, stats] : report.per_group) {
    report.total += stats.total;
    report.correct += stats.correct;
    if (stats.total == 0) continue;
    stats.accuracy = static_cast<double>(stats.correct) / static_cast<double>(stats.total);
    if (first || stats.accuracy < report.worst_accuracy) {
      report.worst_group = key;
      report.worst_accuracy = stats.accuracy;
      first = false;
    }
  }
  report.average_accuracy = static_cast<double>(report.correct) / static_cast<double>(report.total);
  return report;
}

inline GroupReport evaluate_groups(const TrainedModel& model, const Dataset& dataset) {
  return evaluate_groups(model.params, dataset);
}

// ---------------------------------------------------------------------------
// Cross-seed aggregation

struct MeanStd {
  double mean = 0.0;
  std::optional<double> stddev;  // absent for a single run
};

struct AggregateReport {
  std::size_t runs = 0;
  MeanStd average_accuracy;
  MeanStd worst_accuracy;
  std::map<GroupKey, MeanStd> per_group;
};

// Sample mean and sample standard deviation (n - 1 divisor).
inline MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  double sum = 0.0;
  for (const double v : values) sum += v;
  MeanStd result;
  result.mean = sum / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (const double v : values) ss += (v - result.mean) * (v - result.mean);
    result.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return result;
}

inline AggregateReport aggregate(const std::vector<GroupReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate: no reports");
  AggregateReport agg;
  agg.runs = reports.size();
  std::vector<double> values;
  values.reserve(reports.size());
  for (const GroupReport& r : reports) values.push_back(r.average_accuracy);
  agg.average_accuracy = mean_std(values);
  values.clear();
  for (const GroupReport& r : reports) values.push_back(r.worst_accuracy);
  agg.worst_accuracy = mean_std(values);
  for (const auto& [key, stats] : reports.front().per_group) {
    if (stats.total == 0) continue;
    values.clear();
    for (const GroupReport& r : reports) {
      const auto it = r.per_group.find(key);
      if (it == r.per_group.end() || it->second.total == 0) {
        throw std::invalid_argument("aggregate: group composition differs across reports");
      }
      values.push_back(it->second.accuracy);
    }
    agg.per_group[key] = mean_std(values);
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Paired t-test

struct TTestResult {
  int df = 0;
  double t = 0.0;
  std::optional<double> p;  // absent when the differences have zero variance
  bool degenerate = false;
};

// Two-sided paired t-test on differences d = x - y, pairs aligned by index
// (runs paired by seed). Zero-variance differences are reported as
// degenerate rather than given a p-value.
inline TTestResult paired_t_test(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  const std::size_t n = xs.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = xs[i] - ys[i];
  const MeanStd stats = mean_std(d);
  TTestResult result;
  result.df = static_cast<int>(n - 1);
  if (!stats.stddev || *stats.stddev == 0.0) {
    result.degenerate = true;
    return result;
  }
  result.t = stats.mean / (*stats.stddev / std::sqrt(static_cast<double>(n)));
  const double tail = 1.0 - student_t_cdf(std::fabs(result.t), result.df);
  result.p = 2.0 * tail;
  return result;
}

// ---------------------------------------------------------------------------
// OOD composition of the error set

// Per group g: |E ∩ s_out ∩ g| / |E ∩ g|. Groups whose error intersection is
// empty report an absent value, not zero.
inline std::map<GroupKey, std::optional<double>> ood_fraction_per_group(
    const ErrorSet& error_ids, const OodPartition& partition, const Dataset& dataset) {
  for (const std::int64_t id : error_ids.ids) {
    if (partition.scores.find(id) == partition.scores.end()) {
      throw std::invalid_argument("ood_fraction_per_group: error id " + std::to_string(id) +
                                  " is not covered by the partition");
    }
  }
  std::map<GroupKey, std::int64_t> errors_in_group;
  std::map<GroupKey, std::int64_t> ood_in_group;
  for (int y = 0; y < dataset.num_classes; ++y) {
    for (int a = 0; a < 2; ++a) {
      errors_in_group[GroupKey{y, a}] = 0;
      ood_in_group[GroupKey{y, a}] = 0;
    }
  }
  for (const Example& ex : dataset.examples) {
    if (!error_ids.contains(ex.id)) continue;
    const GroupKey key{ex.label, ex.attribute};
    ++errors_in_group[key];
    if (std::binary_search(partition.s_out.begin(), partition.s_out.end(), ex.id)) {
      ++ood_in_group[key];
    }
  }
  std::map<GroupKey, std::optional<double>> fractions;
  for (const auto& [key, count] : errors_in_group) {
    if (count == 0) {
      fractions[key] = std::nullopt;
    } else {
      fractions[key] = static_cast<double>(ood_in_group[key]) / static_cast<double>(count);
    }
  }
  return fractions;
}

}  // namespace jttm
