#include "jttm/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "test_util.hpp"

using namespace jttm;

namespace {

Dataset balanced_three_class(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.feature_dim = 2;
  spec.examples_per_group = {{40, 0}, {40, 0}, {40, 0}};
  spec.group_means = {{Vec{3.0, 0.0}, Vec{3.0, 0.0}},
                      {Vec{0.0, 3.0}, Vec{0.0, 3.0}},
                      {Vec{-3.0, 0.0}, Vec{-3.0, 0.0}}};
  spec.noise_scale = 0.3;
  spec.seed = seed;
  return generate_synthetic(spec);
}

MlpParams zero_model(int in, int classes) {
  MlpParams params = init_params({in, 4, classes}, 0);
  oracle::for_each_param(params, [](double& v) { v = 0.0; });
  return params;
}

}  // namespace

TEST(EvaluateGroups, PerfectModel) {
  const Dataset dataset = balanced_three_class(1);
  TrainConfig config;
  config.epochs = 10;
  config.hidden_dims = {8};
  config.seed = 1;
  const TrainedModel model = train_erm(dataset, config);
  const GroupReport report = evaluate_groups(model, dataset);
  ASSERT_EQ(report.average_accuracy, 1.0);
  EXPECT_EQ(report.worst_accuracy, 1.0);
  for (const auto& [key, stats] : report.per_group) {
    if (stats.total > 0) {
      EXPECT_EQ(stats.accuracy, 1.0);
    }
  }
}

TEST(EvaluateGroups, ConstantPredictorOnBalancedData) {
  const Dataset dataset = balanced_three_class(2);
  const GroupReport report = evaluate_groups(zero_model(2, 3), dataset);
  EXPECT_NEAR(report.average_accuracy, 1.0 / 3.0, 1e-12);
  EXPECT_EQ(report.worst_accuracy, 0.0);
  // Ties in the minimum break lexicographically: class 1 before class 2.
  EXPECT_EQ(report.worst_group, (GroupKey{1, 0}));
}

TEST(EvaluateGroups, AccountingIdentities) {
  const Dataset dataset = balanced_three_class(3);
  const GroupReport report = evaluate_groups(zero_model(2, 3), dataset);
  std::int64_t total = 0, correct = 0;
  for (const auto& [key, stats] : report.per_group) {
    total += stats.total;
    correct += stats.correct;
    if (stats.total > 0) {
      EXPECT_GE(stats.accuracy, report.worst_accuracy);
    }
  }
  EXPECT_EQ(total, static_cast<std::int64_t>(dataset.size()));
  EXPECT_EQ(report.average_accuracy, static_cast<double>(correct) / total);
}

TEST(EvaluateGroups, EmptyGroupsExcludedFromWorst) {
  Dataset dataset;
  dataset.num_classes = 2;
  dataset.feature_dim = 1;
  dataset.examples.push_back({0, Vec{1.0}, 0, 0, false});
  dataset.examples.push_back({1, Vec{1.0}, 0, 0, false});
  const GroupReport report = evaluate_groups(zero_model(1, 2), dataset);
  EXPECT_EQ(report.worst_group, (GroupKey{0, 0}));
  EXPECT_EQ(report.worst_accuracy, 1.0);  // the only nonempty group
  EXPECT_THROW(evaluate_groups(zero_model(1, 2), Dataset{}), std::invalid_argument);
}

TEST(Aggregate, IdenticalReportsHaveZeroStd) {
  const Dataset dataset = balanced_three_class(4);
  const GroupReport report = evaluate_groups(zero_model(2, 3), dataset);
  const AggregateReport agg = aggregate({report, report, report});
  EXPECT_EQ(agg.runs, 3u);
  ASSERT_TRUE(agg.average_accuracy.stddev.has_value());
  EXPECT_EQ(*agg.average_accuracy.stddev, 0.0);
  EXPECT_EQ(agg.average_accuracy.mean, report.average_accuracy);
}

TEST(Aggregate, TwoValueClosedForm) {
  const double a = 0.81, b = 0.93;
  const MeanStd ms = mean_std(std::vector<double>{a, b});
  EXPECT_NEAR(ms.mean, (a + b) / 2.0, 1e-15);
  ASSERT_TRUE(ms.stddev.has_value());
  EXPECT_NEAR(*ms.stddev, std::fabs(a - b) / std::sqrt(2.0), 1e-15);
}

TEST(Aggregate, MatchesTwoPassOracle) {
  const std::vector<double> values{0.481, 0.562, 0.529, 0.497, 0.555};
  const MeanStd ms = mean_std(values);
  double mean = 0.0;
  for (const double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  const double stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  EXPECT_NEAR(ms.mean, mean, 1e-12);
  EXPECT_NEAR(*ms.stddev, stddev, 1e-12);
}

TEST(Aggregate, PermutationInvariant) {
  const Dataset dataset = balanced_three_class(5);
  TrainConfig config;
  config.epochs = 1;
  config.hidden_dims = {4};
  std::vector<GroupReport> reports;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    config.seed = seed;
    reports.push_back(evaluate_groups(train_erm(dataset, config), dataset));
  }
  const AggregateReport forward = aggregate(reports);
  std::reverse(reports.begin(), reports.end());
  const AggregateReport reversed = aggregate(reports);
  EXPECT_NEAR(forward.average_accuracy.mean, reversed.average_accuracy.mean, 1e-12);
  EXPECT_NEAR(*forward.worst_accuracy.stddev, *reversed.worst_accuracy.stddev, 1e-12);
}

TEST(Aggregate, SingleRunHasNoStd) {
  const Dataset dataset = balanced_three_class(6);
  const GroupReport report = evaluate_groups(zero_model(2, 3), dataset);
  const AggregateReport agg = aggregate({report});
  EXPECT_FALSE(agg.average_accuracy.stddev.has_value());
}

TEST(PairedTTest, IdenticalSamplesAreDegenerate) {
  const std::vector<double> xs{0.5, 0.6, 0.7};
  const TTestResult result = paired_t_test(xs, xs);
  EXPECT_TRUE(result.degenerate);
  EXPECT_FALSE(result.p.has_value());
}

TEST(PairedTTest, ConstantNonzeroDifferenceIsDegenerate) {
  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0, 5.0};
  const std::vector<double> ys{0.0, 1.0, 2.0, 3.0, 4.0};  // d = (1,1,1,1,1)
  const TTestResult result = paired_t_test(xs, ys);
  EXPECT_TRUE(result.degenerate);
}

TEST(PairedTTest, PinnedThreeSampleCase) {
  // d = (0.5, 1.0, 1.5): t = sqrt(3) * 1.0 / 0.5 = 3.4641, two-sided p ~ 0.0742.
  const std::vector<double> xs{1.5, 2.0, 2.5};
  const std::vector<double> ys{1.0, 1.0, 1.0};
  const TTestResult result = paired_t_test(xs, ys);
  EXPECT_EQ(result.df, 2);
  EXPECT_NEAR(result.t, 2.0 * std::sqrt(3.0), 1e-12);
  ASSERT_TRUE(result.p.has_value());
  // Closed form for df = 2: p = 1 - t / sqrt(2 + t^2).
  EXPECT_NEAR(*result.p, 1.0 - result.t / std::sqrt(2.0 + result.t * result.t), 1e-10);
  EXPECT_NEAR(*result.p, 0.0742, 5e-5);
  // Quadrature oracle on the t density.
  const double oracle_p = 2.0 * (1.0 - oracle::student_t_cdf_quadrature(result.t, 2, 2000000));
  EXPECT_NEAR(*result.p, oracle_p, 1e-8);
}

TEST(PairedTTest, AntisymmetricInArguments) {
  const std::vector<double> xs{0.52, 0.61, 0.47, 0.58};
  const std::vector<double> ys{0.49, 0.66, 0.42, 0.50};
  const TTestResult ab = paired_t_test(xs, ys);
  const TTestResult ba = paired_t_test(ys, xs);
  EXPECT_NEAR(ab.t, -ba.t, 1e-12);
  EXPECT_NEAR(*ab.p, *ba.p, 1e-12);
}

TEST(PairedTTest, RejectsBadInputs) {
  const std::vector<double> xs{1.0, 2.0};
  const std::vector<double> ys{1.0};
  EXPECT_THROW(paired_t_test(xs, ys), std::invalid_argument);
  const std::vector<double> one{1.0};
  EXPECT_THROW(paired_t_test(one, one), std::invalid_argument);
}

TEST(OodFractions, EmptySOutGivesZeroWhereDefined) {
  const Dataset dataset = balanced_three_class(7);
  OodPartition partition;
  for (const Example& ex : dataset.examples) {
    partition.scores[ex.id] = {};
    partition.s_in.push_back(ex.id);
  }
  ErrorSet errors;
  errors.ids = {0, 1, 2, 45, 90};
  const auto fractions = ood_fraction_per_group(errors, partition, dataset);
  for (const auto& [key, fraction] : fractions) {
    if (fraction) {
      EXPECT_EQ(*fraction, 0.0);
    }
  }
}

TEST(OodFractions, FullyOodGroupReportsOne) {
  Dataset dataset;
  dataset.num_classes = 2;
  dataset.feature_dim = 1;
  for (std::int64_t i = 0; i < 6; ++i) {
    dataset.examples.push_back({i, Vec{0.0}, static_cast<int>(i % 2), 0, false});
  }
  OodPartition partition;
  for (const Example& ex : dataset.examples) partition.scores[ex.id] = {};
  partition.s_out = {1, 3};  // both label-1 errors
  partition.s_in = {0, 2, 4, 5};
  ErrorSet errors;
  errors.ids = {0, 1, 3};
  const auto fractions = ood_fraction_per_group(errors, partition, dataset);
  EXPECT_EQ(*fractions.at(GroupKey{1, 0}), 1.0);
  EXPECT_EQ(*fractions.at(GroupKey{0, 0}), 0.0);
  // Groups without errors report absence, not zero.
  EXPECT_FALSE(fractions.at(GroupKey{0, 1}).has_value());
}

TEST(OodFractions, BoundedAndMonotoneInSOut) {
  const Dataset dataset = balanced_three_class(8);
  ErrorSet errors;
  for (const Example& ex : dataset.examples) {
    if (ex.id % 3 == 0) errors.ids.push_back(ex.id);
  }
  OodPartition small, large;
  for (const Example& ex : dataset.examples) {
    small.scores[ex.id] = {};
    large.scores[ex.id] = {};
  }
  for (const std::int64_t id : errors.ids) {
    if (id % 6 == 0) small.s_out.push_back(id);
    if (id % 3 == 0) large.s_out.push_back(id);
  }
  const auto f_small = ood_fraction_per_group(errors, small, dataset);
  const auto f_large = ood_fraction_per_group(errors, large, dataset);
  for (const auto& [key, fraction] : f_small) {
    if (!fraction) continue;
    EXPECT_GE(*fraction, 0.0);
    EXPECT_LE(*fraction, 1.0);
    EXPECT_LE(*fraction, *f_large.at(key));  // growing s_out never shrinks a fraction
  }
}
