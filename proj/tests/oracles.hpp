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

// Test-only reference implementations. Written with plain loops over
// std::vector so they share no code path with the library.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "nvrm/data.hpp"
#include "nvrm/models.hpp"
#include "nvrm/optimizers.hpp"
#include "nvrm/parameters.hpp"
#include "nvrm/random.hpp"

namespace nvrm::oracle {

/// Mean cross-entropy from a row-major logits buffer, naive log-sum-exp.
inline double cross_entropy(const std::vector<double>& logits, std::size_t classes,
                            const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < classes; ++j) m = std::max(m, logits[i * classes + j]);
    double s = 0;
    for (std::size_t j = 0; j < classes; ++j) s += std::exp(logits[i * classes + j] - m);
    total += -(logits[i * classes + labels[i]] - m - std::log(s));
  }
  return total / static_cast<double>(labels.size());
}

/// Scalar-loop FCN forward pass for head `head`.
template <typename T>
std::vector<double> fcn_logits(const FcnConfig& cfg, const ParameterSet<T>& p,
                               const std::vector<double>& x, std::size_t n, std::size_t head = 0) {
  std::vector<double> h = x;
  std::size_t width = cfg.input_width();
  const std::size_t hidden = cfg.hidden_layers();
  for (std::size_t l = 0; l <= hidden; ++l) {
    const std::size_t wi = l < hidden ? 2 * l : 2 * hidden + 2 * head;
    const Tensor<T>& w = p[wi];
    const Tensor<T>& b = p[wi + 1];
    const std::size_t out = w.dim(1);
    std::vector<double> z(n * out);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) {
        double acc = static_cast<double>(b[o]);
        for (std::size_t k = 0; k < width; ++k)
          acc += h[i * width + k] * static_cast<double>(w[k * out + o]);
        z[i * out + o] = l < hidden ? std::max(0.0, acc) : acc;
      }
    h = std::move(z);
    width = out;
  }
  return h;
}

template <typename T>
double fcn_loss(const FcnConfig& cfg, const ParameterSet<T>& p, const Tensor<T>& x,
                const std::vector<int>& y, std::size_t head = 0) {
  std::vector<double> xs(x.data().begin(), x.data().end());
  return cross_entropy(fcn_logits(cfg, p, xs, y.size(), head), cfg.output_width(), y);
}

// L(theta) = 1/2 sum_i a_i (theta_i - c_i)^2 over two tensors.
struct Quadratic {
  ParameterSet<double> a, c;

  explicit Quadratic(Rng& rng) {
    a.add("w", Tensor<double>(Shape{3, 2}));
    a.add("b", Tensor<double>(Shape{4}));
    c = a.zeros_like();
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].size(); ++k) {
        a[i][k] = 0.5 + rng.uniform();
        c[i][k] = rng.normal();
      }
  }

  GradientMap<double> grad(const ParameterSet<double>& p) const {
    GradientMap<double> g = p.zeros_like();
    for (std::size_t i = 0; i < p.size(); ++i)
      g[i].array() = a[i].array() * (p[i].array() - c[i].array());
    return g;
  }

  ParameterSet<double> start() const {
    ParameterSet<double> p = a.zeros_like();
    for (auto& e : p) e.value.fill(0.3);
    return p;
  }
};

/// Scalar Adam with L2 decay folded into the gradient.
struct ScalarAdam {
  double lr, b1, b2, eps, wd;
  double m = 0, v = 0;
  int t = 0;

  double step(double theta, double g) {
    ++t;
    g += wd * theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace nvrm::oracle
