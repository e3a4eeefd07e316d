#pragma once

// The three training procedures. The first stage trains a plain classifier
// and extracts the set of misclassified training examples; the second stage
// retrains from scratch on a weighted-mean objective that upweights that
// set, optionally pruned of Mahalanobis outliers first. All runs are pure
// functions of (dataset, config).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "jttm/dataset.hpp"
#include "jttm/model.hpp"
#include "jttm/ood.hpp"
#include "jttm/rng.hpp"

namespace jttm {

enum class Method { erm, jtt, jtt_m };
enum class OptimizerKind { sgd, adamw };
enum class LrSchedule { constant, linear_decay };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::erm: return "erm";
    case Method::jtt: return "jtt";
    case Method::jtt_m: return "jtt_m";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "erm") return Method::erm;
  if (s == "jtt") return Method::jtt;
  if (s == "jtt_m") return Method::jtt_m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

struct TrainConfig {
  int epochs = 2;
  int batch_size = 32;
  double learning_rate = 1e-2;  // 2e-5 is the usual choice for encoder embeddings
  std::vector<int> hidden_dims{16};
  OptimizerKind optimizer_stage1 = OptimizerKind::sgd;
  OptimizerKind optimizer_stage2 = OptimizerKind::adamw;
  double weight_decay = 0.0;
  std::optional<double> grad_clip = 1.0;  // stage 2 and plain training; stage 1 never clips
  LrSchedule lr_schedule = LrSchedule::linear_decay;
  double lambda_up = 1.0;
  int df = 4;
  double alpha = 0.001;
  bool squared_statistic = true;
  bool reinit_stage2 = true;  // false continues stage 2 from stage-1 weights
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& config) {
  if (config.epochs < 1) throw std::invalid_argument("config: epochs must be positive");
  if (config.batch_size < 1) throw std::invalid_argument("config: batch_size must be positive");
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate must be positive");
  for (const int h : config.hidden_dims) {
    if (h < 1) throw std::invalid_argument("config: hidden dims must be positive");
  }
  if (config.weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be nonnegative");
  if (config.grad_clip && !(*config.grad_clip > 0.0)) {
    throw std::invalid_argument("config: grad_clip must be positive");
  }
  if (!(config.lambda_up >= 1.0)) throw std::invalid_argument("config: lambda_up must be >= 1");
  if (config.df < 1) throw std::invalid_argument("config: df must be a positive integer");
  if (!(config.alpha > 0.0 && config.alpha < 1.0)) {
    throw std::invalid_argument("config: alpha must lie in (0, 1)");
  }
}

struct Provenance {
  Method method = Method::erm;
  TrainConfig config;
  std::size_t error_set_size = 0;
  std::size_t removed_outliers = 0;
};

struct TrainedModel {
  MlpParams params;
  Provenance provenance;
  ErrorSet error_set;               // stage-1 errors (empty for plain training)
  std::optional<OodPartition> ood;  // present for the outlier-pruned method
};

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerState {
  std::vector<Layer> m;  // first moments, parameter layout
  std::vector<Layer> v;  // second moments
  std::int64_t step = 0;
};

namespace detail {

inline double global_grad_norm(const MlpGrads& grads) {
  double sum = 0.0;
  for (const Layer& layer : grads.layers) {
    for (const double g : layer.weights) sum += g * g;
    for (const double g : layer.bias) sum += g * g;
  }
  return std::sqrt(sum);
}

inline void ensure_moments(OptimizerState& state, const MlpParams& params) {
  if (!state.m.empty()) return;
  for (const Layer& layer : params.layers) {
    Layer zero;
    zero.in = layer.in;
    zero.out = layer.out;
    zero.weights.assign(layer.weights.size(), 0.0);
    zero.bias.assign(layer.bias.size(), 0.0);
    state.m.push_back(zero);
    state.v.push_back(std::move(zero));
  }
}

}  // namespace detail

// One update. sgd: theta <- theta - lr * g. adamw: decoupled weight decay
// theta <- theta - lr * wd * theta applied before the bias-corrected moment
// step with beta = (0.9, 0.999), eps = 1e-8. When grad_clip is set, the
// whole-gradient global norm is rescaled to it first.
inline void optimizer_step(OptimizerKind kind, OptimizerState& state, MlpParams& params,
                           const MlpGrads& grads, double lr, double weight_decay,
                           std::optional<double> grad_clip) {
  if (!std::isfinite(lr) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("optimizer_step: non-finite hyperparameter");
  }
  const double norm = detail::global_grad_norm(grads);
  if (!std::isfinite(norm)) throw std::invalid_argument("optimizer_step: non-finite gradient");
  double scale = 1.0;
  if (grad_clip && norm > *grad_clip) scale = *grad_clip / norm;

  if (kind == OptimizerKind::sgd) {
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      Layer& layer = params.layers[l];
      const Layer& g = grads.layers[l];
      for (std::size_t i = 0; i < layer.weights.size(); ++i) {
        layer.weights[i] -= lr * scale * g.weights[i];
      }
      for (std::size_t i = 0; i < layer.bias.size(); ++i) {
        layer.bias[i] -= lr * scale * g.bias[i];
      }
    }
    return;
  }

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  detail::ensure_moments(state, params);
  ++state.step;
  const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Layer& layer = params.layers[l];
    const Layer& g = grads.layers[l];
    Layer& m = state.m[l];
    Layer& v = state.v[l];
    const auto update = [&](double& theta, double& m_i, double& v_i, double grad) {
      grad *= scale;
      theta -= lr * weight_decay * theta;
      m_i = kBeta1 * m_i + (1.0 - kBeta1) * grad;
      v_i = kBeta2 * v_i + (1.0 - kBeta2) * grad * grad;
      const double m_hat = m_i / bias1;
      const double v_hat = v_i / bias2;
      theta -= lr * m_hat / (std::sqrt(v_hat) + kEps);
    };
    for (std::size_t i = 0; i < layer.weights.size(); ++i) {
      update(layer.weights[i], m.weights[i], v.weights[i], g.weights[i]);
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      update(layer.bias[i], m.bias[i], v.bias[i], g.bias[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Objectives

// (1/N_up) (lambda_up * sum_E loss + sum_not_E loss) with
// N_up = N + (lambda_up - 1) |E|, evaluated over the whole dataset. Equals
// the plain empirical risk when lambda_up = 1 or E is empty.
inline double upweighted_objective(const MlpParams& params, const Dataset& dataset,
                                   const ErrorSet& error_ids, double lambda_up) {
  if (!(lambda_up >= 1.0)) throw std::invalid_argument("upweighted_objective: lambda_up must be >= 1");
  std::vector<std::int64_t> dataset_ids;
  dataset_ids.reserve(dataset.examples.size());
  for (const Example& ex : dataset.examples) dataset_ids.push_back(ex.id);
  std::sort(dataset_ids.begin(), dataset_ids.end());
  for (const std::int64_t id : error_ids.ids) {
    if (!std::binary_search(dataset_ids.begin(), dataset_ids.end(), id)) {
      throw std::invalid_argument("upweighted_objective: error id not in dataset");
    }
  }
  double weighted_sum = 0.0;
  double total_weight = 0.0;
  for (const Example& ex : dataset.examples) {
    const double w = error_ids.contains(ex.id) ? lambda_up : 1.0;
    const ForwardTrace trace = forward(params, ex.features);
    weighted_sum += w * logit_cross_entropy(trace.logits, ex.label);
    total_weight += w;
  }
  return weighted_sum / total_weight;
}

inline double erm_objective(const MlpParams& params, const Dataset& dataset) {
  return upweighted_objective(params, dataset, ErrorSet{}, 1.0);
}

// ---------------------------------------------------------------------------
// Training loop

inline std::uint64_t derive_stage2_seed(std::uint64_t seed) {
  return mix_seed(seed, Stream::stage2);
}

namespace detail {

// Weighted-mean minibatch training. Runs epochs * ceil(N / batch) steps over
// deterministic per-(seed, epoch) shuffles. Aborts on a non-finite loss.
inline MlpParams train_weighted(const Dataset& dataset, const std::vector<double>& weights,
                                const TrainConfig& config, OptimizerKind kind,
                                std::optional<double> grad_clip, LrSchedule schedule,
                                std::uint64_t seed, const MlpParams* init_from = nullptr) {
  if (dataset.examples.empty()) throw std::invalid_argument("train: empty dataset");
  if (weights.size() != dataset.examples.size()) {
    throw std::invalid_argument("train: weights size mismatch");
  }
  std::vector<int> dims;
  dims.push_back(dataset.feature_dim);
  for (const int h : config.hidden_dims) dims.push_back(h);
  dims.push_back(dataset.num_classes);

  MlpParams params = init_from ? *init_from : init_params(dims, mix_seed(seed, Stream::param_init));
  OptimizerState state;

  const std::size_t n = dataset.examples.size();
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = static_cast<std::size_t>(config.epochs) * steps_per_epoch;

  std::vector<WeightedExample> items;
  items.reserve(batch);
  std::size_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    SplitMix64 rng(mix_seed(seed, Stream::shuffle, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> perm = random_permutation(n, rng);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(start + batch, n);
      items.clear();
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = dataset.examples[perm[k]];
        items.push_back({&ex.features, ex.label, weights[perm[k]]});
      }
      const double lr = schedule == LrSchedule::linear_decay
                            ? config.learning_rate *
                                  static_cast<double>(total_steps - step) / static_cast<double>(total_steps)
                            : config.learning_rate;
      auto [grads, loss] = gradient(params, items);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                 " (lr " + std::to_string(lr) + ")");
      }
      optimizer_step(kind, state, params, grads, lr, config.weight_decay, grad_clip);
      ++step;
    }
  }
  return params;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Error set

inline ErrorSet collect_error_set(const MlpParams& params, const Dataset& dataset) {
  ErrorSet errors;
  for (const Example& ex : dataset.examples) {
    if (predict(params, ex.features) != ex.label) errors.ids.push_back(ex.id);
  }
  std::sort(errors.ids.begin(), errors.ids.end());
  return errors;
}

inline ErrorSet collect_error_set(const TrainedModel& model, const Dataset& dataset) {
  return collect_error_set(model.params, dataset);
}

// Penultimate-layer representation of every example, in dataset order.
inline std::vector<FeaturePoint> penultimate_features(const MlpParams& params,
                                                      const Dataset& dataset) {
  std::vector<FeaturePoint> points;
  points.reserve(dataset.examples.size());
  for (const Example& ex : dataset.examples) {
    ForwardTrace trace = forward(params, ex.features);
    points.push_back({ex.id, std::move(trace.penultimate), ex.label});
  }
  return points;
}

// ---------------------------------------------------------------------------
// Methods

inline TrainedModel train_erm(const Dataset& dataset, const TrainConfig& config) {
  validate(config);
  const std::vector<double> weights(dataset.examples.size(), 1.0);
  TrainedModel model;
  model.params = detail::train_weighted(dataset, weights, config, config.optimizer_stage2,
                                        config.grad_clip, config.lr_schedule, config.seed);
  model.provenance = {Method::erm, config, 0, 0};
  return model;
}

namespace detail {

// Stage 1: plain SGD at a constant learning rate, no clipping.
inline MlpParams train_stage1(const Dataset& dataset, const TrainConfig& config) {
  const std::vector<double> weights(dataset.examples.size(), 1.0);
  return train_weighted(dataset, weights, config, config.optimizer_stage1, std::nullopt,
                        LrSchedule::constant, config.seed);
}

// Stage 2: fresh initialization from a derived seed, trained with the plain
// (stage-2) optimizer settings on weights that upweight the kept error ids.
inline MlpParams train_stage2(const Dataset& dataset, const ErrorSet& kept_errors,
                              const TrainConfig& config, const MlpParams* stage1_params) {
  std::vector<double> weights(dataset.examples.size(), 1.0);
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    if (kept_errors.contains(dataset.examples[i].id)) weights[i] = config.lambda_up;
  }
  const MlpParams* init_from = config.reinit_stage2 ? nullptr : stage1_params;
  return train_weighted(dataset, weights, config, config.optimizer_stage2, config.grad_clip,
                        config.lr_schedule, derive_stage2_seed(config.seed), init_from);
}

}  // namespace detail

inline TrainedModel train_jtt(const Dataset& dataset, const TrainConfig& config) {
  validate(config);
  const MlpParams stage1 = detail::train_stage1(dataset, config);
  ErrorSet errors = collect_error_set(stage1, dataset);
  TrainedModel model;
  model.params = detail::train_stage2(dataset, errors, config, &stage1);
  model.provenance = {Method::jtt, config, errors.size(), 0};
  model.error_set = std::move(errors);
  return model;
}

inline TrainedModel train_jtt_m(const Dataset& dataset, const TrainConfig& config) {
  validate(config);
  const MlpParams stage1 = detail::train_stage1(dataset, config);
  ErrorSet errors = collect_error_set(stage1, dataset);
  // Class statistics come from the stage-1 penultimate features of the whole
  // training set, not only the error set.
  const std::vector<FeaturePoint> points = penultimate_features(stage1, dataset);
  const std::vector<ClassGaussian> gaussians = fit_class_gaussians(points);
  OodPartition partition = partition_ood(points, gaussians, config.df, config.alpha,
                                         OodOptions{config.squared_statistic, true});
  const ErrorSet kept = prune_error_set(errors, partition);
  TrainedModel model;
  model.params = detail::train_stage2(dataset, kept, config, &stage1);
  model.provenance = {Method::jtt_m, config, errors.size(), errors.size() - kept.size()};
  model.error_set = std::move(errors);
  model.ood = std::move(partition);
  return model;
}

inline TrainedModel train(Method method, const Dataset& dataset, const TrainConfig& config) {
  switch (method) {
    case Method::erm: return train_erm(dataset, config);
    case Method::jtt: return train_jtt(dataset, config);
    case Method::jtt_m: return train_jtt_m(dataset, config);
  }
  throw std::invalid_argument("train: unknown method");
}

}  // namespace jttm
