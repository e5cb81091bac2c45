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

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "nvrm/autodiff.hpp"
#include "nvrm/data.hpp"
#include "nvrm/models.hpp"
#include "nvrm/optimizers.hpp"
#include "nvrm/random.hpp"

namespace nvrm {

/// Extra loss terms appended to a recorded forward pass; returns the new
/// total loss node.
template <typename T>
using LossHook = std::function<Var(Tape<T>&, Var loss, const ParameterSet<T>& params)>;

struct EpochStats {
  double mean_loss = 0;
  std::size_t steps = 0;
};

/// One pass over `data` in shuffled minibatches of `batch_size` (the last
/// batch may be smaller). Gradients are taken at the stored weights, which
/// for neural-variable optimizers are the perturbed ones.
template <typename T>
EpochStats train_epoch(const FcnConfig& model, ParameterSet<T>& params, Optimizer<T>& opt,
                       const Dataset<T>& data, std::size_t batch_size, Rng& shuffle_rng,
                       std::size_t head = 0, const ParamMask& mask = {},
                       const LossHook<T>& hook = {}) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  data.validate();
  const auto order = shuffle_rng.permutation(data.size());
  EpochStats stats;
  double total = 0;
  std::vector<int> labels;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    const std::span<const std::size_t> idx(order.data() + begin, end - begin);
    Tensor<T> x = gather_rows(data.images, idx);
    labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.labels[idx[i]];
    auto fwd = forward_loss(model, params, x, labels, head);
    total += fwd.loss_value();
    Var loss = hook ? hook(fwd.tape, fwd.loss, params) : fwd.loss;
    GradientMap<T> grads = fwd.tape.backward(loss, params);
    opt.step(params, grads, mask);
    ++stats.steps;
  }
  stats.mean_loss = stats.steps ? total / static_cast<double>(stats.steps) : 0.0;
  return stats;
}

/// Accuracy of `params` on `data`.
template <typename T>
double evaluate_accuracy(const FcnConfig& model, const ParameterSet<T>& params,
                         const Dataset<T>& data, std::size_t head = 0) {
  return accuracy(predict(model, params, data.images, head), data.labels);
}

/// Accuracy against the given labels restricted to rows where `mask == want`.
/// Returns -1 when no row qualifies.
template <typename T>
double masked_accuracy(const Tensor<T>& logits, std::span<const int> labels,
                       const std::vector<bool>& mask, bool want) {
  const auto pred = argmax_rows(logits);
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (mask[i] != want) continue;
    ++total;
    hits += pred[i] == labels[i];
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : -1.0;
}

}  // namespace nvrm
