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

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape records every operation in execution order, so node ids are a
// topological order by construction. Parameters enter as borrowed leaves:
// the tape keeps a pointer to the caller's tensor, which must stay alive and
// unmodified until backward() returns. The same holds for the constant
// tensors handed to weighted_squared_distance().

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nvrm/errors.hpp"
#include "nvrm/parameters.hpp"
#include "nvrm/tensor.hpp"

namespace nvrm {

enum class Reduction { kMean, kSum };

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Input that never receives a gradient.
  Var constant(Tensor<T> value) {
    Node n;
    n.op = Op::kConstant;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  /// Borrowed leaf for parameter `index` of `params`.
  Var parameter(const ParameterSet<T>& params, std::size_t index) {
    Node n;
    n.op = Op::kParameter;
    n.borrowed = &params[index];
    n.param_index = index;
    n.needs_grad = true;
    return push(std::move(n));
  }

  /// (n x k) * (k x m).
  Var matmul(Var a, Var b) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& w = value(b);
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
      throw DimensionError("matmul: left operand " + shape_string(x.shape()) +
                           " incompatible with right operand " + shape_string(w.shape()));
    Tensor<T> out(Shape{x.dim(0), w.dim(1)});
    out.matrix().noalias() = x.matrix() * w.matrix();
    return push_op(Op::kMatmul, {a, b}, std::move(out));
  }

  /// Adds a length-m bias to every row of an (n x m) input.
  Var add_bias(Var a, Var bias) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& b = value(bias);
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
      throw DimensionError("add_bias: bias " + shape_string(b.shape()) + " does not match input " +
                           shape_string(x.shape()));
    Tensor<T> out = x;
    out.matrix().rowwise() += b.matrix().row(0);
    return push_op(Op::kAddBias, {a, bias}, std::move(out));
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    out.array() = out.array().max(T{0});
    return push_op(Op::kRelu, {a}, std::move(out));
  }

  /// Fused softmax + cross-entropy against integer labels, stabilised by
  /// subtracting the row maximum. Saves the softmax probabilities.
  Var softmax_cross_entropy(Var logits, std::span<const int> labels,
                            Reduction reduction = Reduction::kMean) {
    const Tensor<T>& z = value(logits);
    if (z.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be rank 2");
    const std::size_t n = z.dim(0), c = z.dim(1);
    if (labels.size() != n)
      throw DimensionError("softmax_cross_entropy: batch_y has " + std::to_string(labels.size()) +
                           " labels but logits have " + std::to_string(n) + " rows");
    if (n == 0) throw DimensionError("softmax_cross_entropy: empty batch");
    Tensor<T> probs(z.shape());
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const int y = labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw DimensionError("softmax_cross_entropy: label " + std::to_string(y) +
                             " outside [0, " + std::to_string(c) + ")");
      const T* row = &z.at(i, 0);
      T m = row[0];
      for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
      T s = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const T e = std::exp(row[j] - m);
        probs.at(i, j) = e;
        s += e;
      }
      for (std::size_t j = 0; j < c; ++j) probs.at(i, j) /= s;
      total += static_cast<double>(std::log(s) + m - row[y]);
    }
    if (reduction == Reduction::kMean) total /= static_cast<double>(n);
    Node node;
    node.op = Op::kSoftmaxCrossEntropy;
    node.inputs = {logits.id};
    node.owned = Tensor<T>::scalar(static_cast<T>(total));
    node.saved = std::move(probs);
    node.labels.assign(labels.begin(), labels.end());
    node.reduction = reduction;
    node.needs_grad = nodes_[logits.id].needs_grad;
    return push(std::move(node));
  }

  Var sum(Var a) {
    return push_op(Op::kSum, {a}, Tensor<T>::scalar(value(a).array().sum()));
  }

  /// ½‖x‖².
  Var half_squared_norm(Var a) {
    return push_op(Op::kHalfSquaredNorm, {a},
                   Tensor<T>::scalar(T{0.5} * value(a).array().square().sum()));
  }

  /// coef · Σ weight ⊙ (x − anchor)². `anchor` and `weight` are borrowed.
  Var weighted_squared_distance(Var a, const Tensor<T>& anchor, const Tensor<T>& weight, T coef) {
    const Tensor<T>& x = value(a);
    if (!x.same_shape(anchor) || !x.same_shape(weight))
      throw DimensionError("weighted_squared_distance: anchor/weight shape mismatch for " +
                           shape_string(x.shape()));
    const T v = coef * (weight.array() * (x.array() - anchor.array()).square()).sum();
    Node node;
    node.op = Op::kWeightedSquaredDistance;
    node.inputs = {a.id};
    node.owned = Tensor<T>::scalar(v);
    node.anchor = &anchor;
    node.weight = &weight;
    node.coef = coef;
    node.needs_grad = nodes_[a.id].needs_grad;
    return push(std::move(node));
  }

  Var add(Var a, Var b) {
    if (!value(a).same_shape(value(b)))
      throw DimensionError("add: shapes " + shape_string(value(a).shape()) + " and " +
                           shape_string(value(b).shape()));
    Tensor<T> out = value(a);
    out.array() += value(b).array();
    return push_op(Op::kAdd, {a, b}, std::move(out));
  }

  Var scale(Var a, T c) {
    Tensor<T> out = value(a);
    out.array() *= c;
    Var v = push_op(Op::kScale, {a}, std::move(out));
    nodes_[v.id].coef = c;
    return v;
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.borrowed ? *n.borrowed : n.owned;
  }

  /// Gradient of the loss with respect to node `v`; valid after backward().
  /// Empty when `v` does not influence the loss.
  const Tensor<T>& grad(Var v) const { return grads_.at(v.id); }

  /// One reverse sweep from the scalar `loss`. Returns a gradient for every
  /// entry of `params` (zeros for parameters absent from the tape).
  GradientMap<T> backward(Var loss, const ParameterSet<T>& params) {
    if (consumed_) throw StateError("backward called twice on the same tape; re-run forward");
    if (value(loss).size() != 1) throw DimensionError("backward: loss must be a scalar");
    consumed_ = true;
    grads_.assign(nodes_.size(), Tensor<T>());
    grads_[loss.id] = Tensor<T>::scalar(T{1});
    std::vector<Tensor<T>> acc(params.size());

    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || grads_[id].size() == 0) continue;
      const Tensor<T>& g = grads_[id];
      switch (n.op) {
        case Op::kConstant:
          break;
        case Op::kParameter: {
          if (n.param_index >= params.size() || &params[n.param_index] != n.borrowed)
            throw StateError("backward: parameter leaf does not belong to the given ParameterSet");
          // Every consumer of the leaf has been visited, so its buffer can be moved out.
          if (acc[n.param_index].size() == 0)
            acc[n.param_index] = std::move(grads_[id]);
          else
            acc[n.param_index].array() += g.array();
          break;
        }
        case Op::kMatmul: {
          const Tensor<T>& x = value(Var{n.inputs[0]});
          const Tensor<T>& w = value(Var{n.inputs[1]});
          if (needs(n.inputs[0])) accum(n.inputs[0], x.shape()).matrix().noalias() += g.matrix() * w.matrix().transpose();
          if (needs(n.inputs[1])) accum(n.inputs[1], w.shape()).matrix().noalias() += x.matrix().transpose() * g.matrix();
          break;
        }
        case Op::kAddBias: {
          if (needs(n.inputs[0])) accum(n.inputs[0], g.shape()).array() += g.array();
          if (needs(n.inputs[1])) {
            auto& gb = accum(n.inputs[1], value(Var{n.inputs[1]}).shape());
            gb.matrix().row(0) += g.matrix().colwise().sum();
          }
          break;
        }
        case Op::kRelu: {
          auto& gx = accum(n.inputs[0], g.shape());
          gx.array() += (n.owned.array() > T{0}).select(g.array(), T{0});
          break;
        }
        case Op::kSoftmaxCrossEntropy: {
          const std::size_t rows = n.saved.dim(0);
          const T scale = n.reduction == Reduction::kMean ? g.item() / static_cast<T>(rows) : g.item();
          auto& gz = accum(n.inputs[0], n.saved.shape());
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < n.saved.dim(1); ++j) {
              const T onehot = static_cast<std::size_t>(n.labels[i]) == j ? T{1} : T{0};
              gz.at(i, j) += scale * (n.saved.at(i, j) - onehot);
            }
          }
          break;
        }
        case Op::kSum: {
          auto& gx = accum(n.inputs[0], value(Var{n.inputs[0]}).shape());
          gx.array() += g.item();
          break;
        }
        case Op::kHalfSquaredNorm: {
          const Tensor<T>& x = value(Var{n.inputs[0]});
          accum(n.inputs[0], x.shape()).array() += g.item() * x.array();
          break;
        }
        case Op::kWeightedSquaredDistance: {
          const Tensor<T>& x = value(Var{n.inputs[0]});
          accum(n.inputs[0], x.shape()).array() +=
              (T{2} * n.coef * g.item()) * n.weight->array() * (x.array() - n.anchor->array());
          break;
        }
        case Op::kAdd: {
          if (needs(n.inputs[0])) accum(n.inputs[0], g.shape()).array() += g.array();
          if (needs(n.inputs[1])) accum(n.inputs[1], g.shape()).array() += g.array();
          break;
        }
        case Op::kScale: {
          accum(n.inputs[0], g.shape()).array() += n.coef * g.array();
          break;
        }
      }
    }
    GradientMap<T> out;
    for (std::size_t i = 0; i < params.size(); ++i)
      out.add(params.name(i), acc[i].size() ? std::move(acc[i]) : Tensor<T>(params[i].shape()));
    return out;
  }

 private:
  enum class Op {
    kConstant,
    kParameter,
    kMatmul,
    kAddBias,
    kRelu,
    kSoftmaxCrossEntropy,
    kSum,
    kHalfSquaredNorm,
    kWeightedSquaredDistance,
    kAdd,
    kScale,
  };

  struct Node {
    Op op = Op::kConstant;
    std::vector<std::size_t> inputs;
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T> saved;
    std::vector<int> labels;
    Reduction reduction = Reduction::kMean;
    const Tensor<T>* anchor = nullptr;
    const Tensor<T>* weight = nullptr;
    T coef = T{1};
    std::size_t param_index = 0;
    bool needs_grad = false;
  };

  Var push(Node n) {
    if (consumed_) throw StateError("cannot record on a tape after backward");
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push_op(Op op, std::initializer_list<Var> inputs, Tensor<T> out) {
    Node n;
    n.op = op;
    for (Var v : inputs) {
      n.inputs.push_back(v.id);
      n.needs_grad = n.needs_grad || nodes_.at(v.id).needs_grad;
    }
    n.owned = std::move(out);
    return push(std::move(n));
  }

  bool needs(std::size_t id) const { return nodes_[id].needs_grad; }

  Tensor<T>& accum(std::size_t id, const Shape& shape) {
    if (grads_[id].size() == 0 && shape_size(shape) > 0) grads_[id] = Tensor<T>(shape);
    return grads_[id];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool consumed_ = false;
};

/// Free-function spelling of Tape::backward.
template <typename T>
GradientMap<T> backward(Tape<T>& tape, Var loss, const ParameterSet<T>& params) {
  return tape.backward(loss, params);
}

/// Central-difference gradient (L(θ + h e_i) − L(θ − h e_i)) / 2h for every
/// coordinate of `params`.
template <typename T>
GradientMap<T> finite_diff_grad(const std::function<double(const ParameterSet<T>&)>& loss_fn,
                                const ParameterSet<T>& params, double h) {
  if (!(h > 0)) throw DomainError("finite_diff_grad: step h must be positive");
  ParameterSet<T> probe = params;
  GradientMap<T> out = params.zeros_like();
  std::size_t flat = 0;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i, ++flat) {
      const T orig = probe[p][i];
      probe[p][i] = static_cast<T>(orig + h);
      const double plus = loss_fn(probe);
      probe[p][i] = static_cast<T>(orig - h);
      const double minus = loss_fn(probe);
      probe[p][i] = orig;
      if (!std::isfinite(plus) || !std::isfinite(minus))
        throw NumericError("finite_diff_grad: non-finite loss at probe of '" + params.name(p) + "'",
                           flat);
      out[p][i] = static_cast<T>((plus - minus) / (2 * h));
    }
  }
  return out;
}

/// Largest elementwise relative error |a − b| / max(|a|, |b|, floor).
template <typename T>
double max_relative_error(const GradientMap<T>& a, const GradientMap<T>& b, double floor = 1e-6) {
  require_same_layout(a, b, "max_relative_error");
  double worst = 0;
  for (std::size_t p = 0; p < a.size(); ++p)
    for (std::size_t i = 0; i < a[p].size(); ++i) {
      const double x = a[p][i], y = b[p][i];
      const double denom = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / denom);
    }
  return worst;
}

}  // namespace nvrm
