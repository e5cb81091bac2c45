// Copyright 2026 The nvrm Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Fully-connected ReLU classifiers with optional multi-head output.
//
// Parameter layout for widths [d, h1, ..., hk, c] and H heads:
//   trunk.<i>.weight (in x out), trunk.<i>.bias (out)   for each hidden layer
//   head.<j>.weight  (hk x c),   head.<j>.bias  (c)     for j < H
// Weights are stored input-major so a layer is x * W + b.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nvrm/autodiff.hpp"
#include "nvrm/errors.hpp"
#include "nvrm/parameters.hpp"
#include "nvrm/random.hpp"
#include "nvrm/tensor.hpp"

namespace nvrm {

struct FcnConfig {
  std::vector<std::size_t> layer_widths;  // input, hidden..., output
  std::size_t heads = 1;

  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t output_width() const { return layer_widths.back(); }
  std::size_t hidden_layers() const { return layer_widths.size() - 2; }

  void validate() const {
    if (layer_widths.size() < 3)
      throw ConfigError("FcnConfig: need input, at least one hidden and an output width");
    for (std::size_t i = 0; i < layer_widths.size(); ++i)
      if (layer_widths[i] == 0)
        throw ConfigError("FcnConfig: layer width " + std::to_string(i) + " is zero");
    if (heads < 1) throw ConfigError("FcnConfig: heads must be at least 1");
  }
};

inline std::string trunk_name(std::size_t layer, const char* what) {
  return "trunk." + std::to_string(layer) + "." + what;
}
inline std::string head_name(std::size_t head, const char* what) {
  return "head." + std::to_string(head) + "." + what;
}

/// He-initialised parameters: N(0, 2 / fan_in) weights, zero biases.
template <typename T>
ParameterSet<T> fcn_init(const FcnConfig& config, Rng& rng) {
  config.validate();
  ParameterSet<T> params;
  auto dense = [&](const std::string& w, const std::string& b, std::size_t in, std::size_t out) {
    Tensor<T> weight(Shape{in, out});
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    for (auto& v : weight.data()) v = static_cast<T>(stddev * rng.normal());
    params.add(w, std::move(weight));
    params.add(b, Tensor<T>(Shape{out}));
  };
  const auto& w = config.layer_widths;
  for (std::size_t l = 0; l + 2 < w.size(); ++l)
    dense(trunk_name(l, "weight"), trunk_name(l, "bias"), w[l], w[l + 1]);
  for (std::size_t h = 0; h < config.heads; ++h)
    dense(head_name(h, "weight"), head_name(h, "bias"), w[w.size() - 2], w.back());
  return params;
}

/// Index pair of one dense layer inside a ParameterSet.
struct DenseSlots {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

/// Layers used when evaluating `head`: the shared trunk followed by the head.
inline std::vector<DenseSlots> fcn_layers(const FcnConfig& config, std::size_t head) {
  if (head >= config.heads)
    throw ConfigError("head index " + std::to_string(head) + " out of range (model has " +
                      std::to_string(config.heads) + " heads)");
  std::vector<DenseSlots> layers;
  const std::size_t hidden = config.hidden_layers();
  for (std::size_t l = 0; l < hidden; ++l) layers.push_back({2 * l, 2 * l + 1});
  layers.push_back({2 * hidden + 2 * head, 2 * hidden + 2 * head + 1});
  return layers;
}

/// Parameter indices belonging to `head` (weight, bias).
inline std::vector<std::size_t> head_parameter_indices(const FcnConfig& config, std::size_t head) {
  const auto layers = fcn_layers(config, head);
  return {layers.back().weight, layers.back().bias};
}

/// Parameter indices trained when fitting `head`: trunk plus that head.
inline std::vector<std::size_t> trainable_for_head(const FcnConfig& config, std::size_t head) {
  std::vector<std::size_t> out;
  for (const auto& l : fcn_layers(config, head)) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

template <typename T>
void check_fcn_params(const FcnConfig& config, const ParameterSet<T>& params) {
  const std::size_t expected = 2 * (config.hidden_layers() + config.heads);
  if (params.size() != expected)
    throw DimensionError("model expects " + std::to_string(expected) + " parameter tensors, got " +
                         std::to_string(params.size()));
}

template <typename T>
void check_batch(const FcnConfig& config, const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != config.input_width())
    throw DimensionError("batch_x has shape " + shape_string(x.shape()) + ", expected (n," +
                         std::to_string(config.input_width()) + ")");
}

/// Intermediate nodes of one traced forward pass.
struct FcnTrace {
  struct Layer {
    Var input;
    Var preactivation;
    DenseSlots slots;
  };
  std::vector<Layer> layers;
  Var logits;
};

template <typename T>
FcnTrace fcn_trace(Tape<T>& tape, const FcnConfig& config, const ParameterSet<T>& params, Var x,
                   std::size_t head) {
  check_fcn_params(config, params);
  FcnTrace trace;
  const auto layers = fcn_layers(config, head);
  Var h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    if (tape.value(h).dim(1) != params[s.weight].dim(0))
      throw DimensionError("parameter '" + params.name(s.weight) + "' has shape " +
                           shape_string(params[s.weight].shape()) + " but its input has width " +
                           std::to_string(tape.value(h).dim(1)));
    Var z = tape.add_bias(tape.matmul(h, tape.parameter(params, s.weight)),
                          tape.parameter(params, s.bias));
    trace.layers.push_back({h, z, s});
    h = l + 1 < layers.size() ? tape.relu(z) : z;
  }
  trace.logits = h;
  return trace;
}

/// Logits without recording a tape. Processes the batch in row chunks.
template <typename T>
Tensor<T> predict(const FcnConfig& config, const ParameterSet<T>& params, const Tensor<T>& x,
                  std::size_t head = 0, std::size_t chunk = 2048) {
  check_fcn_params(config, params);
  check_batch(config, x);
  const auto layers = fcn_layers(config, head);
  const std::size_t n = x.dim(0), c = config.output_width();
  Tensor<T> out(Shape{n, c});
  RowMatrix<T> h, z;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t rows = std::min(chunk, n - begin);
    auto xin = x.matrix().middleRows(begin, rows);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& w = params[layers[l].weight];
      const auto& b = params[layers[l].bias];
      if (l == 0)
        z.noalias() = xin * w.matrix();
      else
        z.noalias() = h * w.matrix();
      z.rowwise() += b.matrix().row(0);
      if (l + 1 < layers.size()) {
        h = z.cwiseMax(T{0});
      }
    }
    out.matrix().middleRows(begin, rows) = z;
  }
  return out;
}

/// Result of a recorded forward pass.
template <typename T>
struct ForwardResult {
  Tape<T> tape;
  Var loss;
  FcnTrace trace;

  T loss_value() const { return tape.value(loss).item(); }
};

/// Mean softmax cross-entropy of `batch_y` under the model, recorded on a
/// fresh tape for backward().
template <typename T>
ForwardResult<T> forward_loss(const FcnConfig& config, const ParameterSet<T>& params,
                              const Tensor<T>& batch_x, std::span<const int> batch_y,
                              std::size_t head = 0, Reduction reduction = Reduction::kMean) {
  check_batch(config, batch_x);
  if (batch_x.dim(0) != batch_y.size())
    throw DimensionError("batch_x has " + std::to_string(batch_x.dim(0)) + " rows but batch_y has " +
                         std::to_string(batch_y.size()) + " labels");
  ForwardResult<T> r;
  Var x = r.tape.constant(batch_x);
  r.trace = fcn_trace(r.tape, config, params, x, head);
  r.loss = r.tape.softmax_cross_entropy(r.trace.logits, batch_y, reduction);
  return r;
}

/// Mean cross-entropy computed from logits (no tape).
template <typename T>
double mean_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("mean_cross_entropy: logits/labels mismatch");
  if (labels.empty()) throw DomainError("mean_cross_entropy: empty batch");
  double total = 0;
  const std::size_t c = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T* row = &logits.at(i, 0);
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, static_cast<double>(row[j]));
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j]) - m);
    total += std::log(s) + m - static_cast<double>(row[labels[i]]);
  }
  return total / static_cast<double>(labels.size());
}

/// Row argmax; ties resolve to the lowest class index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Fraction of rows whose argmax equals the label.
template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const int> labels) {
  if (labels.empty() || logits.size() == 0) throw DomainError("accuracy: empty batch");
  if (logits.rows() != labels.size())
    throw DimensionError("accuracy: " + std::to_string(logits.rows()) + " logit rows vs " +
                         std::to_string(labels.size()) + " labels");
  const auto pred = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace nvrm
