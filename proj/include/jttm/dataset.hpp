#pragma once

// Dataset construction, ingestion, and class-attribute group partitioning:
// a synthetic spurious-correlation generator, a negation-word attribute
// detector for text records, label-noise injection, and a line-delimited
// JSON load/save pair with round-trip identity.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "jttm/rng.hpp"

namespace jttm {

using Vec = std::vector<double>;

struct Example {
  std::int64_t id = 0;
  Vec features;
  int label = 0;
  int attribute = 0;
  bool corrupted = false;

  bool operator==(const Example&) const = default;
};

// One class-attribute combination. A C-class binary-attribute dataset has
// exactly 2C keys.
struct GroupKey {
  int label = 0;
  int attribute = 0;

  auto operator<=>(const GroupKey&) const = default;
};

struct Dataset {
  std::vector<Example> examples;
  int num_classes = 0;
  int feature_dim = 0;
  std::string split_tag = "train";
  std::vector<std::string> label_names;  // optional, parallel to class indices

  std::size_t size() const { return examples.size(); }

  bool operator==(const Dataset&) const = default;
};

// Ids of training examples misclassified by a first-stage model.
struct ErrorSet {
  std::vector<std::int64_t> ids;  // sorted, unique

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool contains(std::int64_t id) const {
    return std::binary_search(ids.begin(), ids.end(), id);
  }
};

struct SyntheticSpec {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<std::array<std::int64_t, 2>> examples_per_group;  // C x {attr 0, attr 1}
  std::vector<std::array<Vec, 2>> group_means;                  // C x 2 centers
  double noise_scale = 1.0;
  double label_noise_rate = 0.0;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Negation-word attribute

// Merged negation-word set used as the spurious attribute on text records.
inline const std::set<std::string, std::less<>>& negation_words() {
  static const std::set<std::string, std::less<>> words = {
      "no",      "never", "nothing",   "nobody", "not",     "yet",
      "refuse",  "refuses", "refused", "fail",   "fails",   "failed",
      "only",    "incapable", "unable", "neither", "none"};
  return words;
}

// Returns 1 iff any whole token of the text, lowercased and split on
// non-alphabetic boundaries, is a negation word. Locale-independent: only
// ASCII letters count as token characters, so substrings inside longer
// tokens ("not" in "Notably") never match.
inline int detect_negation_attribute(std::string_view text) {
  std::string token;
  const auto token_matches = [&token]() {
    const bool hit = !token.empty() && negation_words().count(token) > 0;
    token.clear();
    return hit;
  };
  for (const char c : text) {
    const char lower = static_cast<char>(c | 0x20);
    if (lower >= 'a' && lower <= 'z') {
      token.push_back(lower);
    } else if (token_matches()) {
      return 1;
    }
  }
  return token_matches() ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Validation

inline void validate(const Dataset& dataset) {
  if (dataset.split_tag != "train" && dataset.split_tag != "dev" && dataset.split_tag != "test") {
    throw std::invalid_argument("dataset: split tag must be train, dev, or test");
  }
  std::set<std::int64_t> seen;
  for (const Example& ex : dataset.examples) {
    if (static_cast<int>(ex.features.size()) != dataset.feature_dim) {
      throw std::invalid_argument("dataset: inconsistent feature dimension for id " +
                                  std::to_string(ex.id));
    }
    if (ex.label < 0 || ex.label >= dataset.num_classes) {
      throw std::invalid_argument("dataset: label out of range for id " +
                                  std::to_string(ex.id));
    }
    if (ex.attribute != 0 && ex.attribute != 1) {
      throw std::invalid_argument("dataset: attribute must be 0 or 1 for id " +
                                  std::to_string(ex.id));
    }
    if (!seen.insert(ex.id).second) {
      throw std::invalid_argument("dataset: duplicate id " + std::to_string(ex.id));
    }
  }
}

inline void validate(const SyntheticSpec& spec) {
  if (spec.num_classes < 1) throw std::invalid_argument("synthetic spec: num_classes must be positive");
  if (spec.feature_dim < 1) throw std::invalid_argument("synthetic spec: feature_dim must be positive");
  if (!(spec.noise_scale > 0.0) || !std::isfinite(spec.noise_scale)) {
    throw std::invalid_argument("synthetic spec: noise_scale must be positive and finite");
  }
  if (!(spec.label_noise_rate >= 0.0 && spec.label_noise_rate < 1.0)) {
    throw std::invalid_argument("synthetic spec: label_noise_rate must lie in [0, 1)");
  }
  if (static_cast<int>(spec.examples_per_group.size()) != spec.num_classes ||
      static_cast<int>(spec.group_means.size()) != spec.num_classes) {
    throw std::invalid_argument("synthetic spec: counts and means must have one row per class");
  }
  std::int64_t total = 0;
  for (int y = 0; y < spec.num_classes; ++y) {
    for (int a = 0; a < 2; ++a) {
      const std::int64_t n = spec.examples_per_group[y][a];
      if (n < 0) throw std::invalid_argument("synthetic spec: negative group count");
      total += n;
      const Vec& mean = spec.group_means[y][a];
      if (static_cast<int>(mean.size()) != spec.feature_dim) {
        throw std::invalid_argument("synthetic spec: group mean dimension mismatch");
      }
      for (const double v : mean) {
        if (!std::isfinite(v)) throw std::invalid_argument("synthetic spec: non-finite group mean");
      }
    }
  }
  if (total == 0) throw std::invalid_argument("synthetic spec: zero total examples");
}

// ---------------------------------------------------------------------------
// Group partition

// Maps every group key (including empty groups) to the ids it contains, in
// dataset order. Every id lands in exactly one list.
inline std::map<GroupKey, std::vector<std::int64_t>> group_partition(const Dataset& dataset) {
  std::map<GroupKey, std::vector<std::int64_t>> groups;
  for (int y = 0; y < dataset.num_classes; ++y) {
    for (int a = 0; a < 2; ++a) {
      groups[GroupKey{y, a}];
    }
  }
  for (const Example& ex : dataset.examples) {
    groups[GroupKey{ex.label, ex.attribute}].push_back(ex.id);
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Label noise

// Returns a copy where floor(rate * N) examples, selected deterministically
// from the seed, carry a uniformly different label and corrupted = true.
inline Dataset inject_label_noise(const Dataset& dataset, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("inject_label_noise: rate must lie in [0, 1)");
  }
  Dataset noisy = dataset;
  const std::size_t n = noisy.examples.size();
  const std::size_t count = static_cast<std::size_t>(rate * static_cast<double>(n));
  if (count == 0 || noisy.num_classes < 2) return noisy;

  SplitMix64 select_rng(mix_seed(seed, Stream::noise_selection));
  std::vector<std::size_t> order = random_permutation(n, select_rng);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + count);
  std::sort(chosen.begin(), chosen.end());

  SplitMix64 label_rng(mix_seed(seed, Stream::noise_labels));
  for (const std::size_t idx : chosen) {
    Example& ex = noisy.examples[idx];
    const int shift = 1 + static_cast<int>(label_rng.next_below(
                              static_cast<std::uint64_t>(noisy.num_classes - 1)));
    ex.label = (ex.label + shift) % noisy.num_classes;
    ex.corrupted = true;
  }
  return noisy;
}

// ---------------------------------------------------------------------------
// Synthetic generation

// Emits exactly the requested count per group; features are the group mean
// plus isotropic Gaussian noise. Groups are generated in (label, attribute)
// order with sequential ids, so equal specs yield field-for-field equal
// datasets.
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::string split_tag = "train") {
  validate(spec);
  Dataset dataset;
  dataset.num_classes = spec.num_classes;
  dataset.feature_dim = spec.feature_dim;
  dataset.split_tag = std::move(split_tag);

  SplitMix64 rng(mix_seed(spec.seed, Stream::synthetic_features));
  std::int64_t next_id = 0;
  for (int y = 0; y < spec.num_classes; ++y) {
    for (int a = 0; a < 2; ++a) {
      const Vec& mean = spec.group_means[y][a];
      for (std::int64_t k = 0; k < spec.examples_per_group[y][a]; ++k) {
        Example ex;
        ex.id = next_id++;
        ex.label = y;
        ex.attribute = a;
        ex.features.resize(spec.feature_dim);
        fill_standard_normal(rng, ex.features);
        for (int j = 0; j < spec.feature_dim; ++j) {
          ex.features[j] = mean[j] + spec.noise_scale * ex.features[j];
        }
        dataset.examples.push_back(std::move(ex));
      }
    }
  }
  if (spec.label_noise_rate > 0.0) {
    dataset = inject_label_noise(dataset, spec.label_noise_rate, spec.seed);
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON ingestion and export
//
// File layout: an optional header object (recognized by the absence of a
// "features" key) with "num_classes", "split", and/or "label_map", followed
// by one record per line with keys "features", "label" (integer or mapped
// string), optional "attribute" (0/1), optional "text" (used to derive the
// attribute when "attribute" is absent), optional "corrupted".

struct LoadOptions {
  std::optional<std::map<std::string, int>> label_map;
  std::optional<int> num_classes;
  std::optional<std::string> split_tag;
};

namespace detail {

inline std::vector<std::string> label_names_from_map(const std::map<std::string, int>& label_map) {
  int max_index = -1;
  for (const auto& [name, index] : label_map) max_index = std::max(max_index, index);
  std::vector<std::string> names(static_cast<std::size_t>(max_index + 1));
  for (const auto& [name, index] : label_map) {
    if (index < 0) throw std::invalid_argument("label map: negative class index for '" + name + "'");
    names[static_cast<std::size_t>(index)] = name;
  }
  return names;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& path, const LoadOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());

  Dataset dataset;
  std::map<std::string, int> label_map;
  bool have_label_map = false;
  if (options.label_map) {
    label_map = *options.label_map;
    have_label_map = true;
  }
  std::optional<int> declared_classes = options.num_classes;
  dataset.split_tag = options.split_tag.value_or("train");

  std::string line;
  std::size_t line_number = 0;
  std::size_t record_number = 0;
  bool at_first_json_line = true;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_dataset: line " + std::to_string(line_number) +
                               ": malformed record: " + e.what());
    }
    if (!j.is_object()) {
      throw std::runtime_error("load_dataset: line " + std::to_string(line_number) +
                               ": record is not an object");
    }
    const bool is_header = at_first_json_line && !j.contains("features");
    at_first_json_line = false;
    if (is_header) {
      for (const auto& [key, value] : j.items()) {
        if (key == "num_classes") {
          if (!options.num_classes) declared_classes = value.get<int>();
        } else if (key == "split") {
          if (!options.split_tag) dataset.split_tag = value.get<std::string>();
        } else if (key == "label_map") {
          if (!have_label_map) {
            label_map = value.get<std::map<std::string, int>>();
            have_label_map = true;
          }
        } else {
          throw std::runtime_error("load_dataset: line " + std::to_string(line_number) +
                                   ": unknown header key '" + key + "'");
        }
      }
      continue;
    }
    ++record_number;
    const auto fail = [&](const std::string& message) -> std::runtime_error {
      return std::runtime_error("load_dataset: line " + std::to_string(line_number) +
                                " (record " + std::to_string(record_number) + "): " + message);
    };
    if (!j.contains("features") || !j["features"].is_array()) {
      throw fail("missing 'features' array");
    }
    Example ex;
    ex.id = static_cast<std::int64_t>(record_number - 1);
    for (const auto& v : j["features"]) {
      if (!v.is_number()) throw fail("non-numeric feature value");
      ex.features.push_back(v.get<double>());
    }
    if (dataset.examples.empty()) {
      dataset.feature_dim = static_cast<int>(ex.features.size());
    } else if (static_cast<int>(ex.features.size()) != dataset.feature_dim) {
      throw fail("feature dimension " + std::to_string(ex.features.size()) +
                 " does not match " + std::to_string(dataset.feature_dim));
    }
    if (!j.contains("label")) throw fail("missing 'label'");
    if (j["label"].is_string()) {
      const std::string name = j["label"].get<std::string>();
      const auto it = label_map.find(name);
      if (it == label_map.end()) throw fail("unknown label '" + name + "'");
      ex.label = it->second;
    } else if (j["label"].is_number_integer()) {
      ex.label = j["label"].get<int>();
      if (ex.label < 0) throw fail("unknown label " + std::to_string(ex.label));
    } else {
      throw fail("label must be an integer or a mapped string");
    }
    max_label = std::max(max_label, ex.label);
    if (j.contains("attribute")) {
      ex.attribute = j["attribute"].get<int>();
      if (ex.attribute != 0 && ex.attribute != 1) throw fail("attribute must be 0 or 1");
    } else if (j.contains("text")) {
      ex.attribute = detect_negation_attribute(j["text"].get<std::string>());
    } else {
      throw fail("record has neither 'attribute' nor 'text'");
    }
    if (j.contains("corrupted")) ex.corrupted = j["corrupted"].get<bool>();
    dataset.examples.push_back(std::move(ex));
  }

  if (have_label_map) {
    dataset.label_names = detail::label_names_from_map(label_map);
  }
  if (declared_classes) {
    dataset.num_classes = *declared_classes;
  } else if (have_label_map) {
    dataset.num_classes = static_cast<int>(dataset.label_names.size());
  } else {
    dataset.num_classes = max_label + 1;
  }
  validate(dataset);
  return dataset;
}

// Export in the import format; load(save(d)) == d field-for-field.
inline void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path.string());
  nlohmann::json header;
  header["num_classes"] = dataset.num_classes;
  header["split"] = dataset.split_tag;
  if (!dataset.label_names.empty()) {
    nlohmann::json map = nlohmann::json::object();
    for (std::size_t i = 0; i < dataset.label_names.size(); ++i) {
      map[dataset.label_names[i]] = static_cast<int>(i);
    }
    header["label_map"] = map;
  }
  out << header.dump() << '\n';
  for (const Example& ex : dataset.examples) {
    nlohmann::json j;
    j["features"] = ex.features;
    j["label"] = ex.label;
    j["attribute"] = ex.attribute;
    if (ex.corrupted) j["corrupted"] = true;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Benchmark generator
//
// Three classes, binary attribute, with group counts skewed so that nearly
// every attribute-present example belongs to class 0 while classes 1 and 2
// keep a 50:1 majority/minority split. Feature layout (d = 8, offsets in
// units of the noise scale): axes 0..2 carry the class signal, axis 3
// carries the attribute, axes 4..7 are pure noise. Attribute-present groups
// cluster near the class-0 attribute cluster: the minority groups keep only
// an attenuated own-class component plus a pull along the class-0 axis, so a
// model that leans on the attribute axis misroutes them to class 0.

inline SyntheticSpec skewed_benchmark_spec(const std::string& split, std::uint64_t seed,
                                           double label_noise_rate = 0.0) {
  constexpr int kClasses = 3;
  constexpr int kDim = 8;
  constexpr double kNoiseScale = 0.15;
  constexpr double kClassSeparation = 8.0;  // a=0 cluster offset, in noise units
  constexpr double kAlignedShrink = 0.45;   // minority own-class component
  constexpr double kAlignedPull = 0.85;     // minority component along the class-0 axis
  constexpr double kAttributeShift = 4.0;   // attribute-axis offset, in noise units

  SyntheticSpec spec;
  spec.num_classes = kClasses;
  spec.feature_dim = kDim;
  spec.noise_scale = kNoiseScale;
  spec.label_noise_rate = label_noise_rate;
  spec.seed = seed;

  if (split == "train") {
    spec.examples_per_group = {{1264, 3800}, {3400, 68}, {3400, 68}};
  } else if (split == "dev" || split == "test") {
    spec.examples_per_group = {{316, 950}, {850, 17}, {850, 17}};
  } else {
    throw std::invalid_argument("skewed_benchmark_spec: split must be train, dev, or test");
  }

  spec.group_means.resize(kClasses);
  for (int y = 0; y < kClasses; ++y) {
    for (int a = 0; a < 2; ++a) {
      Vec mean(kDim, 0.0);
      if (a == 0) {
        mean[y] = kClassSeparation * kNoiseScale;
      } else if (y == 0) {
        mean[0] = kClassSeparation * kNoiseScale;
        mean[3] = kAttributeShift * kNoiseScale;
      } else {
        mean[0] = kAlignedPull * kClassSeparation * kNoiseScale;
        mean[y] = kAlignedShrink * kClassSeparation * kNoiseScale;
        mean[3] = kAttributeShift * kNoiseScale;
      }
      spec.group_means[y][a] = std::move(mean);
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Synthetic spec JSON (used by the CLI and experiment configs)

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_classes") spec.num_classes = value.get<int>();
    else if (key == "feature_dim") spec.feature_dim = value.get<int>();
    else if (key == "counts") spec.examples_per_group = value.get<std::vector<std::array<std::int64_t, 2>>>();
    else if (key == "means") spec.group_means = value.get<std::vector<std::array<Vec, 2>>>();
    else if (key == "noise_scale") spec.noise_scale = value.get<double>();
    else if (key == "label_noise_rate") spec.label_noise_rate = value.get<double>();
    else if (key == "seed") spec.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("synthetic spec: unknown key '" + key + "'");
  }
  validate(spec);
  return spec;
}

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& spec) {
  nlohmann::json j;
  j["num_classes"] = spec.num_classes;
  j["feature_dim"] = spec.feature_dim;
  j["counts"] = spec.examples_per_group;
  j["means"] = spec.group_means;
  j["noise_scale"] = spec.noise_scale;
  j["label_noise_rate"] = spec.label_noise_rate;
  j["seed"] = spec.seed;
  return j;
}

}  // namespace jttm
