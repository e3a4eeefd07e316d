#include "jttm/dataset.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

namespace fs = std::filesystem;
using namespace jttm;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "jttm_dataset_tests";
  fs::create_directories(dir);
  return dir / name;
}

SyntheticSpec two_class_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.feature_dim = 3;
  spec.examples_per_group = {{100, 10}, {10, 100}};
  spec.group_means = {{Vec{1.0, 0.0, 0.0}, Vec{1.0, 2.0, 0.0}},
                      {Vec{-1.0, 0.0, 0.0}, Vec{-1.0, 2.0, 0.0}}};
  spec.noise_scale = 0.5;
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST(Negation, SentenceContainingNot) {
  EXPECT_EQ(detect_negation_attribute("Luis Fonsi does not go by his given name on stage."), 1);
}

TEST(Negation, EmptyString) {
  EXPECT_EQ(detect_negation_attribute(""), 0);
}

TEST(Negation, WholeTokenOnly) {
  // Hand-tokenized: notably / the / nonezero / knot / failsafe - no match.
  EXPECT_EQ(detect_negation_attribute("Notably, the nonezero knot failsafe."), 0);
}

TEST(Negation, CaseInsensitiveWholeWordProperty) {
  for (const std::string& word : negation_words()) {
    EXPECT_EQ(detect_negation_attribute(word), 1) << word;
    std::string upper = word;
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return std::toupper(c); });
    EXPECT_EQ(detect_negation_attribute(upper), 1) << upper;
    // Embedded in a longer alphabetic token it must not match.
    EXPECT_EQ(detect_negation_attribute("x" + word + "x"), 0) << word;
    EXPECT_EQ(detect_negation_attribute(word + "ish and q" + word), 0) << word;
  }
}

TEST(Negation, PunctuationAndUtf8Boundaries) {
  EXPECT_EQ(detect_negation_attribute("well,no"), 1);
  EXPECT_EQ(detect_negation_attribute("he said \"never!\""), 1);
  EXPECT_EQ(detect_negation_attribute("caf\xC3\xA9 yet"), 1);
  EXPECT_EQ(detect_negation_attribute("knot knots nots"), 0);
}

TEST(Synthetic, ExactGroupCounts) {
  const Dataset dataset = generate_synthetic(two_class_spec(1));
  EXPECT_EQ(dataset.size(), 220u);
  const auto groups = group_partition(dataset);
  EXPECT_EQ(groups.at(GroupKey{0, 0}).size(), 100u);
  EXPECT_EQ(groups.at(GroupKey{0, 1}).size(), 10u);
  EXPECT_EQ(groups.at(GroupKey{1, 0}).size(), 10u);
  EXPECT_EQ(groups.at(GroupKey{1, 1}).size(), 100u);
}

TEST(Synthetic, LabelNoiseCountIsFloorOfRateTimesN) {
  SyntheticSpec spec = two_class_spec(2);
  spec.examples_per_group = {{50, 50}, {50, 50}};  // N = 200
  spec.label_noise_rate = 0.1;
  const Dataset dataset = generate_synthetic(spec);
  std::size_t corrupted = 0;
  for (const Example& ex : dataset.examples) corrupted += ex.corrupted ? 1 : 0;
  EXPECT_EQ(corrupted, 20u);
}

TEST(Synthetic, Deterministic) {
  const Dataset a = generate_synthetic(two_class_spec(7));
  const Dataset b = generate_synthetic(two_class_spec(7));
  EXPECT_EQ(a, b);
  const Dataset c = generate_synthetic(two_class_spec(8));
  EXPECT_NE(a, c);
}

TEST(Synthetic, RejectsDegenerateSpecs) {
  SyntheticSpec spec = two_class_spec(1);
  spec.examples_per_group = {{0, 0}, {0, 0}};
  EXPECT_THROW(generate_synthetic(spec), std::invalid_argument);
  spec = two_class_spec(1);
  spec.noise_scale = 0.0;
  EXPECT_THROW(generate_synthetic(spec), std::invalid_argument);
  spec = two_class_spec(1);
  spec.group_means[0][0][1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(generate_synthetic(spec), std::invalid_argument);
}

TEST(LabelNoise, RateZeroIsIdentity) {
  const Dataset dataset = generate_synthetic(two_class_spec(3));
  const Dataset noisy = inject_label_noise(dataset, 0.0, 99);
  EXPECT_EQ(dataset, noisy);
}

TEST(LabelNoise, ExactCountAndAlwaysDifferentLabel) {
  SyntheticSpec spec = two_class_spec(4);
  spec.examples_per_group = {{250, 250}, {250, 250}};  // N = 1000
  const Dataset dataset = generate_synthetic(spec);
  const Dataset noisy = inject_label_noise(dataset, 0.05, 5);
  ASSERT_EQ(noisy.size(), dataset.size());
  std::size_t corrupted = 0;
  for (std::size_t i = 0; i < noisy.examples.size(); ++i) {
    if (noisy.examples[i].corrupted) {
      ++corrupted;
      EXPECT_NE(noisy.examples[i].label, dataset.examples[i].label);
    } else {
      EXPECT_EQ(noisy.examples[i], dataset.examples[i]);
    }
  }
  EXPECT_EQ(corrupted, 50u);
  // Original untouched.
  EXPECT_EQ(dataset, generate_synthetic(spec));
}

TEST(LabelNoise, SelectionIsRecoverableByRerun) {
  const Dataset dataset = generate_synthetic(two_class_spec(6));
  const Dataset first = inject_label_noise(dataset, 0.08, 123);
  const Dataset second = inject_label_noise(dataset, 0.08, 123);
  std::set<std::int64_t> ids_first, ids_second;
  for (const Example& ex : first.examples) {
    if (ex.corrupted) ids_first.insert(ex.id);
  }
  for (const Example& ex : second.examples) {
    if (ex.corrupted) ids_second.insert(ex.id);
  }
  EXPECT_EQ(ids_first, ids_second);
  EXPECT_FALSE(ids_first.empty());
}

TEST(LabelNoise, RejectsRateOutsideRange) {
  const Dataset dataset = generate_synthetic(two_class_spec(1));
  EXPECT_THROW(inject_label_noise(dataset, -0.1, 0), std::invalid_argument);
  EXPECT_THROW(inject_label_noise(dataset, 1.0, 0), std::invalid_argument);
}

TEST(Partition, ConstantAttributeGivesCNonemptyGroups) {
  SyntheticSpec spec = two_class_spec(9);
  spec.examples_per_group = {{30, 0}, {40, 0}};
  const Dataset dataset = generate_synthetic(spec);
  const auto groups = group_partition(dataset);
  EXPECT_EQ(groups.size(), 4u);
  EXPECT_EQ(groups.at(GroupKey{0, 0}).size(), 30u);
  EXPECT_EQ(groups.at(GroupKey{1, 0}).size(), 40u);
  EXPECT_TRUE(groups.at(GroupKey{0, 1}).empty());
  EXPECT_TRUE(groups.at(GroupKey{1, 1}).empty());
}

TEST(Partition, SingleExampleDataset) {
  Dataset dataset;
  dataset.num_classes = 3;
  dataset.feature_dim = 1;
  dataset.examples.push_back({0, Vec{0.5}, 1, 1, false});
  const auto groups = group_partition(dataset);
  EXPECT_EQ(groups.size(), 6u);
  std::size_t nonempty = 0;
  for (const auto& [key, ids] : groups) nonempty += ids.empty() ? 0 : 1;
  EXPECT_EQ(nonempty, 1u);
  EXPECT_EQ(groups.at(GroupKey{1, 1}).size(), 1u);
}

TEST(Partition, CoversAllIdsExactlyOnce) {
  const Dataset dataset = generate_synthetic(two_class_spec(10));
  const auto groups = group_partition(dataset);
  std::set<std::int64_t> seen;
  std::size_t total = 0;
  for (const auto& [key, ids] : groups) {
    total += ids.size();
    for (const std::int64_t id : ids) EXPECT_TRUE(seen.insert(id).second);
  }
  EXPECT_EQ(total, dataset.size());
  EXPECT_EQ(seen.size(), dataset.size());
}

TEST(Loader, PositionalIdsAndLabelMap) {
  const fs::path path = temp_file("three_records.jsonl");
  {
    std::ofstream out(path);
    out << R"({"num_classes": 3, "label_map": {"REF": 0, "SUP": 1, "NEI": 2}})" << "\n";
    out << R"({"features": [0.125, -1.5], "label": "SUP", "attribute": 1})" << "\n";
    out << R"({"features": [2.0, 3.0], "label": 0, "attribute": 0})" << "\n";
    out << R"({"features": [4.5, -0.25], "label": "NEI", "text": "it never works"})" << "\n";
  }
  const Dataset dataset = load_dataset(path);
  ASSERT_EQ(dataset.size(), 3u);
  EXPECT_EQ(dataset.num_classes, 3);
  EXPECT_EQ(dataset.feature_dim, 2);
  EXPECT_EQ(dataset.examples[0].id, 0);
  EXPECT_EQ(dataset.examples[1].id, 1);
  EXPECT_EQ(dataset.examples[2].id, 2);
  EXPECT_EQ(dataset.examples[0].label, 1);
  EXPECT_EQ(dataset.examples[1].label, 0);
  EXPECT_EQ(dataset.examples[2].label, 2);
  EXPECT_EQ(dataset.examples[2].attribute, 1);  // derived from the text column
  ASSERT_EQ(dataset.label_names.size(), 3u);
  EXPECT_EQ(dataset.label_names[1], "SUP");
}

TEST(Loader, DimensionMismatchNamesTheRecord) {
  const fs::path path = temp_file("dim_mismatch.jsonl");
  {
    std::ofstream out(path);
    out << R"({"features": [1, 2, 3, 4], "label": 0, "attribute": 0})" << "\n";
    out << R"({"features": [1, 2, 3, 4], "label": 0, "attribute": 0})" << "\n";
    out << R"({"features": [1, 2, 3, 4, 5], "label": 0, "attribute": 0})" << "\n";
  }
  try {
    load_dataset(path);
    FAIL() << "expected dimension mismatch";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("record 3"), std::string::npos) << e.what();
  }
}

TEST(Loader, MalformedRecordReportsLineNumber) {
  const fs::path path = temp_file("malformed.jsonl");
  {
    std::ofstream out(path);
    out << R"({"features": [1], "label": 0, "attribute": 0})" << "\n";
    out << "{not json\n";
  }
  try {
    load_dataset(path);
    FAIL() << "expected parse failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Loader, UnknownLabelRejected) {
  const fs::path path = temp_file("unknown_label.jsonl");
  {
    std::ofstream out(path);
    out << R"({"num_classes": 2})" << "\n";
    out << R"({"features": [1], "label": 5, "attribute": 0})" << "\n";
  }
  EXPECT_THROW(load_dataset(path), std::exception);
}

TEST(Loader, MissingAttributeAndTextRejected) {
  const fs::path path = temp_file("no_attr.jsonl");
  {
    std::ofstream out(path);
    out << R"({"features": [1], "label": 0})" << "\n";
  }
  EXPECT_THROW(load_dataset(path), std::runtime_error);
}

TEST(Loader, RoundTripIdentity) {
  SyntheticSpec spec = two_class_spec(11);
  spec.label_noise_rate = 0.05;
  Dataset dataset = generate_synthetic(spec, "test");
  dataset.label_names = {"alpha", "beta"};
  const fs::path path = temp_file("round_trip.jsonl");
  save_dataset(dataset, path);
  const Dataset reloaded = load_dataset(path);
  EXPECT_EQ(dataset, reloaded);
  // Save again: identical bytes, identical dataset.
  const fs::path path2 = temp_file("round_trip2.jsonl");
  save_dataset(reloaded, path2);
  const Dataset reloaded2 = load_dataset(path2);
  EXPECT_EQ(dataset, reloaded2);
}

TEST(Validate, CatchesBrokenDatasets) {
  Dataset dataset;
  dataset.num_classes = 2;
  dataset.feature_dim = 2;
  dataset.examples.push_back({0, Vec{1.0, 2.0}, 0, 0, false});
  dataset.examples.push_back({0, Vec{1.0, 2.0}, 1, 0, false});
  EXPECT_THROW(validate(dataset), std::invalid_argument);  // duplicate id
  dataset.examples[1].id = 1;
  dataset.examples[1].label = 7;
  EXPECT_THROW(validate(dataset), std::invalid_argument);  // label out of range
  dataset.examples[1].label = 1;
  dataset.examples[1].features = Vec{1.0};
  EXPECT_THROW(validate(dataset), std::invalid_argument);  // dimension mismatch
}
