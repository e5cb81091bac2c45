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

// Continual learning over permuted or split task sequences, with optional
// elastic weight consolidation (EWC).

#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nvrm/autodiff.hpp"
#include "nvrm/data.hpp"
#include "nvrm/models.hpp"
#include "nvrm/optimizers.hpp"
#include "nvrm/training.hpp"

namespace nvrm {

/// Quadratic anchor left behind by one completed task.
template <typename T>
struct EwcAnchor {
  ParameterSet<T> weights;     // theta*_A
  ParameterSet<T> importance;  // diagonal Fisher F, elementwise >= 0
  double lambda = 0;
};

/// Empirical diagonal Fisher: F_i = mean over sampled inputs of
/// (d log p(y | x, theta) / d theta_i)^2 at the observed label.
///
/// Per-sample squared gradients of a dense layer factor as
/// (x_n ⊗ delta_n)^2 = x_n^2 ⊗ delta_n^2, so a whole minibatch is reduced with
/// one matrix product: F_W += (X ∘ X)^T (Δ ∘ Δ), F_b += colsum(Δ ∘ Δ), where Δ
/// holds the per-sample gradients at the pre-activations (sum reduction).
template <typename T>
ParameterSet<T> fisher_diagonal(const FcnConfig& model, const ParameterSet<T>& params,
                                const Dataset<T>& data, std::size_t num_samples, Rng& rng,
                                std::size_t head = 0, std::size_t chunk = 256) {
  if (num_samples == 0) throw DomainError("fisher_diagonal: empty sample");
  if (num_samples > data.size())
    throw DomainError("fisher_diagonal: num_samples exceeds dataset size");
  auto order = rng.permutation(data.size());
  order.resize(num_samples);
  ParameterSet<T> fisher = params.zeros_like();
  std::vector<int> labels;
  for (std::size_t begin = 0; begin < num_samples; begin += chunk) {
    const std::size_t end = std::min(num_samples, begin + chunk);
    const std::span<const std::size_t> idx(order.data() + begin, end - begin);
    labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.labels[idx[i]];
    auto fwd = forward_loss(model, params, gather_rows(data.images, idx), labels, head, Reduction::kSum);
    fwd.tape.backward(fwd.loss, params);
    for (const auto& layer : fwd.trace.layers) {
      const Tensor<T>& delta = fwd.tape.grad(layer.preactivation);
      const Tensor<T>& input = fwd.tape.value(layer.input);
      const RowMatrix<T> d2 = delta.matrix().array().square().matrix();
      const RowMatrix<T> x2 = input.matrix().array().square().matrix();
      fisher[layer.slots.weight].matrix().noalias() += x2.transpose() * d2;
      fisher[layer.slots.bias].matrix().row(0) += d2.colwise().sum();
    }
  }
  const T inv = T{1} / static_cast<T>(num_samples);
  for (auto& e : fisher) e.value.array() *= inv;
  return fisher;
}

/// Appends sum over anchors of (lambda / 2) * sum_i F_i (theta_i − theta*_i)^2
/// to `base_loss` on the tape. Anchors are borrowed until backward().
template <typename T>
Var ewc_loss(Tape<T>& tape, Var base_loss, const ParameterSet<T>& params,
             const std::vector<EwcAnchor<T>>& anchors) {
  Var total = base_loss;
  for (const auto& a : anchors) {
    require_same_layout(params, a.weights, "ewc_loss anchor weights");
    require_same_layout(params, a.importance, "ewc_loss anchor importance");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var term = tape.weighted_squared_distance(tape.parameter(params, i), a.weights[i],
                                                a.importance[i], static_cast<T>(a.lambda / 2));
      total = tape.add(total, term);
    }
  }
  return total;
}

/// Plain evaluation of the EWC penalty (no tape).
template <typename T>
double ewc_penalty(const ParameterSet<T>& params, const std::vector<EwcAnchor<T>>& anchors) {
  double total = 0;
  for (const auto& a : anchors)
    for (std::size_t i = 0; i < params.size(); ++i)
      total += a.lambda / 2 *
               static_cast<double>((a.importance[i].array() *
                                    (params[i].array() - a.weights[i].array()).square())
                                       .sum());
  return total;
}

struct EwcSpec {
  bool enabled = false;
  double lambda = 0;
  std::size_t fisher_samples = 1000;
};

struct ContinualConfig {
  FcnConfig model;
  OptimizerConfig optimizer;
  TaskKind kind = TaskKind::kPermuted;
  std::size_t num_tasks = 5;  // permuted
  std::vector<std::vector<int>> class_sets = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};  // split
  std::size_t batch_size = 256;
  std::size_t epochs_per_task = 1;
  EwcSpec ewc;
  std::uint64_t seed = 0;
  // false: after intermediate tasks only the task just trained is evaluated
  // (other entries of that row are NaN); the last row is always complete.
  bool full_matrix = true;
};

/// accuracy[t][j]: accuracy on task j after training task t (j <= t).
struct ContinualReport {
  std::vector<std::vector<double>> accuracy;
  std::vector<double> base_accuracy;  // accuracy[t][0]
  std::vector<double> mean_accuracy;  // mean over j <= t of accuracy[t][j]
};

/// Random streams used by one continual run, all keyed by the run seed.
enum : std::uint64_t { kStreamInit = 0, kStreamTasks = 1, kStreamShuffle = 2, kStreamNoise = 3, kStreamFisher = 4 };

/// Trains the tasks in order. After each task the weights are de-noised,
/// every task seen so far is evaluated on its test split and, with EWC on, an
/// anchor is recorded. Neural-variable optimizers restart from eps = 0 at each
/// task boundary. Permuted sequences keep one optimizer; split sequences get
/// a fresh optimizer per task and train only the trunk plus the task's head.
/// `on_task_done(t, report, params)` is called after each evaluation with the
/// de-noised weights.
template <typename T>
using TaskCallback = std::function<void(std::size_t, const ContinualReport&, const ParameterSet<T>&)>;

template <typename T>
ContinualReport run_task_sequence(const ContinualConfig& config, const Dataset<T>& train,
                                  const Dataset<T>& test, const TaskCallback<T>& on_task_done = {}) {
  FcnConfig model = config.model;
  model.validate();
  Rng init_rng = Rng::stream(config.seed, kStreamInit);
  Rng task_rng = Rng::stream(config.seed, kStreamTasks);
  Rng shuffle_rng = Rng::stream(config.seed, kStreamShuffle);
  Rng fisher_rng = Rng::stream(config.seed, kStreamFisher);

  const TaskSequence tasks = config.kind == TaskKind::kPermuted
                                 ? make_permuted_tasks(train, config.num_tasks, task_rng)
                                 : make_split_tasks(train, config.class_sets);
  if (config.kind == TaskKind::kSplit && model.heads < tasks.size())
    throw ConfigError("split tasks need one head per task");

  ParameterSet<T> params = fcn_init<T>(model, init_rng);
  auto new_optimizer = [&](std::size_t task) {
    return Optimizer<T>(config.optimizer, params, Rng::stream(config.seed, kStreamNoise + 16 * task));
  };
  Optimizer<T> opt = new_optimizer(0);
  std::vector<EwcAnchor<T>> anchors;
  ContinualReport report;

  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const bool split = config.kind == TaskKind::kSplit;
    const std::size_t head = split ? t : 0;
    ParamMask mask;
    if (split) {
      mask.assign(params.size(), false);
      for (std::size_t i : trainable_for_head(model, head)) mask[i] = true;
      if (t > 0) opt = new_optimizer(t);
    } else if (t > 0) {
      opt.restart(params);
    }
    const Dataset<T> task_train = task_dataset(train, tasks, t);
    LossHook<T> hook;
    if (config.ewc.enabled && !anchors.empty())
      hook = [&anchors](Tape<T>& tape, Var loss, const ParameterSet<T>& p) {
        return ewc_loss(tape, loss, p, anchors);
      };
    for (std::size_t e = 0; e < config.epochs_per_task; ++e)
      train_epoch(model, params, opt, task_train, config.batch_size, shuffle_rng, head, mask, hook);
    opt.finalize(params);

    const bool full_row = config.full_matrix || t + 1 == tasks.size();
    std::vector<double> row(t + 1, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t j = full_row ? 0 : t; j <= t; ++j) {
      const Dataset<T> task_test = task_dataset(test, tasks, j);
      row[j] = evaluate_accuracy(model, params, task_test, split ? j : 0);
    }
    double mean = 0;
    for (double a : row) mean += a;
    report.base_accuracy.push_back(row.front());
    report.mean_accuracy.push_back(mean / static_cast<double>(row.size()));
    report.accuracy.push_back(std::move(row));

    if (config.ewc.enabled && t + 1 < tasks.size()) {
      EwcAnchor<T> a;
      a.weights = params;
      a.importance = fisher_diagonal(model, params, task_train,
                                     std::min(config.ewc.fisher_samples, task_train.size()),
                                     fisher_rng, head);
      a.lambda = config.ewc.lambda;
      anchors.push_back(std::move(a));
    }
    if (on_task_done) on_task_done(t, report, params);
  }
  return report;
}

/// One JSON object per (trained task, evaluated task) cell.
inline std::string continual_report_jsonl(const ContinualReport& report) {
  std::string out;
  for (std::size_t t = 0; t < report.accuracy.size(); ++t)
    for (std::size_t j = 0; j < report.accuracy[t].size(); ++j) {
      if (std::isnan(report.accuracy[t][j])) continue;
      nlohmann::json row = {{"after_task", t}, {"task", j}, {"accuracy", report.accuracy[t][j]}};
      if (!std::isnan(report.base_accuracy[t])) row["base_accuracy"] = report.base_accuracy[t];
      if (!std::isnan(report.mean_accuracy[t])) row["mean_accuracy"] = report.mean_accuracy[t];
      out += row.dump() + "\n";
    }
  return out;
}

}  // namespace nvrm
