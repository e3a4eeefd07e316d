#pragma once

// Feed-forward softmax classifier with exact analytic gradients. Hidden
// layers use tanh; the final layer is affine. The forward pass exposes the
// penultimate activation, which is the feature space for outlier scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jttm/dataset.hpp"
#include "jttm/rng.hpp"

namespace jttm {

struct Layer {
  int in = 0;
  int out = 0;
  Vec weights;  // row-major, out x in
  Vec bias;     // out

  bool operator==(const Layer&) const = default;
};

struct MlpParams {
  std::vector<Layer> layers;

  int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  int output_dim() const { return layers.empty() ? 0 : layers.back().out; }
  int penultimate_dim() const { return layers.empty() ? 0 : layers.back().in; }

  bool operator==(const MlpParams&) const = default;
};

// Gradients share the parameter layout.
using MlpGrads = MlpParams;

struct ForwardTrace {
  Vec penultimate;
  Vec logits;
  Vec probs;
};

struct WeightedExample {
  const Vec* features = nullptr;
  int label = 0;
  double weight = 1.0;
};

// ---------------------------------------------------------------------------
// Initialization

// Glorot-uniform weights in [-s, s] with s = sqrt(6 / (fan_in + fan_out));
// biases zero. Deterministic in the seed.
inline MlpParams init_params(const std::vector<int>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw std::invalid_argument("init_params: need at least input and output dims");
  for (const int d : dims) {
    if (d < 1) throw std::invalid_argument("init_params: dims must be positive");
  }
  SplitMix64 rng(seed);
  MlpParams params;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Layer layer;
    layer.in = dims[l];
    layer.out = dims[l + 1];
    const double s = std::sqrt(6.0 / (layer.in + layer.out));
    layer.weights.resize(static_cast<std::size_t>(layer.in) * layer.out);
    for (double& w : layer.weights) {
      w = (2.0 * rng.next_double() - 1.0) * s;
    }
    layer.bias.assign(static_cast<std::size_t>(layer.out), 0.0);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline void affine(const Layer& layer, const Vec& x, Vec& y) {
  y.assign(static_cast<std::size_t>(layer.out), 0.0);
  for (int o = 0; o < layer.out; ++o) {
    double acc = layer.bias[static_cast<std::size_t>(o)];
    const double* row = layer.weights.data() + static_cast<std::size_t>(o) * layer.in;
    for (int i = 0; i < layer.in; ++i) {
      acc += row[i] * x[static_cast<std::size_t>(i)];
    }
    y[static_cast<std::size_t>(o)] = acc;
  }
}

}  // namespace detail

// Softmax with max subtraction.
inline Vec softmax(const Vec& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec probs(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - m);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

inline ForwardTrace forward(const MlpParams& params, const Vec& features) {
  if (params.layers.empty()) throw std::invalid_argument("forward: empty parameters");
  if (static_cast<int>(features.size()) != params.input_dim()) {
    throw std::invalid_argument("forward: feature dimension " + std::to_string(features.size()) +
                                " does not match input dim " + std::to_string(params.input_dim()));
  }
  ForwardTrace trace;
  Vec activation = features;
  Vec next;
  for (std::size_t l = 0; l + 1 < params.layers.size(); ++l) {
    detail::affine(params.layers[l], activation, next);
    for (double& v : next) v = std::tanh(v);
    activation = next;
  }
  trace.penultimate = activation;
  detail::affine(params.layers.back(), activation, trace.logits);
  trace.probs = softmax(trace.logits);
  return trace;
}

// ---------------------------------------------------------------------------
// Loss

inline double cross_entropy(const Vec& probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size())) {
    throw std::invalid_argument("cross_entropy: label out of range");
  }
  return -std::log(probs[static_cast<std::size_t>(label)]);
}

// -log softmax(logits)[label] via log-sum-exp; equal to cross_entropy on the
// softmax output but stable for extreme logits.
inline double logit_cross_entropy(const Vec& logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size())) {
    throw std::invalid_argument("logit_cross_entropy: label out of range");
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double v : logits) sum += std::exp(v - m);
  return m + std::log(sum) - logits[static_cast<std::size_t>(label)];
}

// ---------------------------------------------------------------------------
// Prediction

// Argmax of the logits; ties break toward the lowest class index.
inline int predict(const MlpParams& params, const Vec& features) {
  const ForwardTrace trace = forward(params, features);
  int best = 0;
  for (int c = 1; c < static_cast<int>(trace.logits.size()); ++c) {
    if (trace.logits[static_cast<std::size_t>(c)] > trace.logits[static_cast<std::size_t>(best)]) {
      best = c;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Gradient

// Analytic backpropagation of the weighted-mean batch loss
// sum_i w_i * l_i / sum_i w_i. Returns the gradient and the batch loss.
inline std::pair<MlpGrads, double> gradient(const MlpParams& params,
                                            std::span<const WeightedExample> batch) {
  if (batch.empty()) throw std::invalid_argument("gradient: empty batch");
  double total_weight = 0.0;
  for (const WeightedExample& item : batch) {
    if (item.weight < 0.0) throw std::invalid_argument("gradient: negative weight");
    total_weight += item.weight;
  }
  if (!(total_weight > 0.0)) throw std::invalid_argument("gradient: total weight is zero");

  MlpGrads grads;
  for (const Layer& layer : params.layers) {
    Layer g;
    g.in = layer.in;
    g.out = layer.out;
    g.weights.assign(layer.weights.size(), 0.0);
    g.bias.assign(layer.bias.size(), 0.0);
    grads.layers.push_back(std::move(g));
  }

  const std::size_t num_layers = params.layers.size();
  double loss = 0.0;
  std::vector<Vec> activations(num_layers + 1);  // activations[0] = input
  Vec delta, prev_delta;
  for (const WeightedExample& item : batch) {
    const double scale = item.weight / total_weight;
    // Forward, keeping every activation.
    activations[0] = *item.features;
    for (std::size_t l = 0; l < num_layers; ++l) {
      detail::affine(params.layers[l], activations[l], activations[l + 1]);
      if (l + 1 < num_layers) {
        for (double& v : activations[l + 1]) v = std::tanh(v);
      }
    }
    const Vec& logits = activations[num_layers];
    loss += scale * logit_cross_entropy(logits, item.label);

    // Backward: softmax cross-entropy gives delta = probs - onehot.
    delta = softmax(logits);
    delta[static_cast<std::size_t>(item.label)] -= 1.0;
    for (double& v : delta) v *= scale;

    for (std::size_t l = num_layers; l-- > 0;) {
      Layer& g = grads.layers[l];
      const Layer& layer = params.layers[l];
      const Vec& input = activations[l];
      for (int o = 0; o < layer.out; ++o) {
        const double d = delta[static_cast<std::size_t>(o)];
        g.bias[static_cast<std::size_t>(o)] += d;
        double* grow = g.weights.data() + static_cast<std::size_t>(o) * layer.in;
        for (int i = 0; i < layer.in; ++i) {
          grow[i] += d * input[static_cast<std::size_t>(i)];
        }
      }
      if (l == 0) break;
      // delta for the previous layer: (W^T delta) * tanh'(z) with
      // tanh'(z) = 1 - a^2 for the stored activation a.
      prev_delta.assign(static_cast<std::size_t>(layer.in), 0.0);
      for (int o = 0; o < layer.out; ++o) {
        const double d = delta[static_cast<std::size_t>(o)];
        const double* row = layer.weights.data() + static_cast<std::size_t>(o) * layer.in;
        for (int i = 0; i < layer.in; ++i) {
          prev_delta[static_cast<std::size_t>(i)] += row[i] * d;
        }
      }
      for (int i = 0; i < layer.in; ++i) {
        const double a = input[static_cast<std::size_t>(i)];
        prev_delta[static_cast<std::size_t>(i)] *= (1.0 - a * a);
      }
      delta = prev_delta;
    }
  }
  return {std::move(grads), loss};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Line-delimited JSON: a dims record followed by one record per layer with
// row-major weights and the bias vector. load(save(p)) == p bitwise for
// finite values.

inline void save_params(const MlpParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_params: cannot open " + path.string());
  std::vector<int> dims;
  for (const Layer& layer : params.layers) dims.push_back(layer.in);
  dims.push_back(params.output_dim());
  out << nlohmann::json{{"dims", dims}}.dump() << '\n';
  for (const Layer& layer : params.layers) {
    out << nlohmann::json{{"weights", layer.weights}, {"bias", layer.bias}}.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_params: write failed for " + path.string());
}

inline MlpParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_params: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_params: empty checkpoint");
  const auto header = nlohmann::json::parse(line);
  const auto dims = header.at("dims").get<std::vector<int>>();
  if (dims.size() < 2) throw std::runtime_error("load_params: malformed dims");
  MlpParams params;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (!std::getline(in, line)) throw std::runtime_error("load_params: truncated checkpoint");
    const auto j = nlohmann::json::parse(line);
    Layer layer;
    layer.in = dims[l];
    layer.out = dims[l + 1];
    layer.weights = j.at("weights").get<Vec>();
    layer.bias = j.at("bias").get<Vec>();
    if (static_cast<int>(layer.weights.size()) != layer.in * layer.out ||
        static_cast<int>(layer.bias.size()) != layer.out) {
      throw std::runtime_error("load_params: layer size mismatch");
    }
    params.layers.push_back(std::move(layer));
  }
  return params;
}

}  // namespace jttm
