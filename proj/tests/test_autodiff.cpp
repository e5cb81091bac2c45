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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "nvrm/autodiff.hpp"
#include "nvrm/models.hpp"
#include "oracles.hpp"

namespace nvrm {
namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

TEST(ForwardLoss, UniformLogitsGiveLogC) {
  for (std::size_t c : {2u, 3u, 10u}) {
    Tape<double> tape;
    Var z = tape.constant(Tensor<double>(Shape{5, c}, 0.7));
    std::vector<int> y = {0, 1, 0, 1, 1};
    Var loss = tape.softmax_cross_entropy(z, y);
    EXPECT_NEAR(tape.value(loss).item(), std::log(static_cast<double>(c)), 1e-14);
  }
}

TEST(ForwardLoss, LargeCorrectMarginDrivesLossToZero) {
  double previous = INFINITY;
  for (double margin : {1.0, 10.0, 100.0, 1000.0}) {
    Tensor<double> z(Shape{2, 3});
    z.at(0, 1) = margin;
    z.at(1, 2) = margin;
    Tape<double> tape;
    Var loss = tape.softmax_cross_entropy(tape.constant(z), std::vector<int>{1, 2});
    const double v = tape.value(loss).item();
    EXPECT_LE(v, previous);
    EXPECT_TRUE(std::isfinite(v));
    previous = v;
  }
  EXPECT_LT(previous, 1e-300);
}

TEST(ForwardLoss, MatchesScalarCrossEntropyOracle) {
  Rng rng(11);
  Tensor<double> z = random_tensor({4, 3}, rng, 2.0);
  const auto y = random_labels(4, 3, rng);
  Tape<double> tape;
  Var loss = tape.softmax_cross_entropy(tape.constant(z), y);
  const std::vector<double> flat(z.data().begin(), z.data().end());
  EXPECT_NEAR(tape.value(loss).item(), oracle::cross_entropy(flat, 3, y), 1e-12);
}

TEST(ForwardLoss, ShapeMismatchNamesTensor) {
  FcnConfig cfg{{4, 3, 2}, 1};
  Rng rng(1);
  auto params = fcn_init<double>(cfg, rng);
  Tensor<double> x(Shape{3, 4});
  std::vector<int> y = {0, 1};
  try {
    forward_loss(cfg, params, x, y);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_y"), std::string::npos) << e.what();
  }
  Tensor<double> wide(Shape{2, 5});
  try {
    forward_loss(cfg, params, wide, y);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_x"), std::string::npos) << e.what();
  }
}

TEST(ForwardLoss, DeterministicForFixedInputs) {
  FcnConfig cfg{{6, 5, 4, 3}, 1};
  Rng a(5), b(5);
  auto pa = fcn_init<double>(cfg, a);
  auto pb = fcn_init<double>(cfg, b);
  Rng data(9);
  Tensor<double> x = random_tensor({8, 6}, data);
  const auto y = random_labels(8, 3, data);
  EXPECT_EQ(forward_loss(cfg, pa, x, y).loss_value(), forward_loss(cfg, pb, x, y).loss_value());
}

TEST(Backward, SumGivesOnes) {
  ParameterSet<double> p;
  Rng rng(2);
  p.add("theta", random_tensor({3, 4}, rng));
  Tape<double> tape;
  Var loss = tape.sum(tape.parameter(p, 0));
  auto g = backward(tape, loss, p);
  for (double v : g[0].data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesTheta) {
  ParameterSet<double> p;
  Rng rng(3);
  p.add("theta", random_tensor({7}, rng));
  Tape<double> tape;
  Var loss = tape.half_squared_norm(tape.parameter(p, 0));
  auto g = backward(tape, loss, p);
  EXPECT_EQ(g[0], p[0]);
}

TEST(Backward, SecondCallOnSameTapeIsStale) {
  ParameterSet<double> p;
  p.add("theta", Tensor<double>(Shape{2}, 1.0));
  Tape<double> tape;
  Var loss = tape.sum(tape.parameter(p, 0));
  tape.backward(loss, p);
  EXPECT_THROW(tape.backward(loss, p), StateError);
}

TEST(Backward, ReusedParameterAccumulates) {
  ParameterSet<double> p;
  p.add("theta", Tensor<double>(Shape{3}, 2.0));
  Tape<double> tape;
  Var a = tape.parameter(p, 0);
  Var loss = tape.add(tape.sum(a), tape.scale(tape.sum(tape.parameter(p, 0)), 3.0));
  auto g = backward(tape, loss, p);
  for (double v : g[0].data()) EXPECT_EQ(v, 4.0);
}

TEST(Backward, TwoLayerFcnMatchesFiniteDifferences) {
  FcnConfig cfg{{5, 7, 3}, 1};
  Rng rng(21);
  auto params = fcn_init<double>(cfg, rng);
  Tensor<double> x = random_tensor({8, 5}, rng);
  const auto y = random_labels(8, 3, rng);
  auto fwd = forward_loss(cfg, params, x, y);
  auto g = fwd.tape.backward(fwd.loss, params);
  auto fd = finite_diff_grad<double>(
      [&](const ParameterSet<double>& p) { return oracle::fcn_loss(cfg, p, x, y); }, params, 1e-5);
  EXPECT_LT(max_relative_error(g, fd), 1e-4);
}

TEST(FiniteDiff, LinearLossIsExact) {
  ParameterSet<double> p;
  p.add("theta", Tensor<double>(Shape{3}, std::vector<double>{0.5, -1.0, 2.0}));
  const std::vector<double> c = {1.5, -2.0, 0.25};
  auto g = finite_diff_grad<double>(
      [&](const ParameterSet<double>& q) {
        double s = 0;
        for (std::size_t i = 0; i < 3; ++i) s += c[i] * q[0][i];
        return s;
      },
      p, 1e-3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[0][i], c[i], 1e-12);
}

TEST(FiniteDiff, QuadraticAtOneTwo) {
  ParameterSet<double> p;
  p.add("theta", Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}));
  auto g = finite_diff_grad<double>(
      [](const ParameterSet<double>& q) { return 0.5 * (q[0][0] * q[0][0] + q[0][1] * q[0][1]); }, p,
      1e-5);
  EXPECT_NEAR(g[0][0], 1.0, 1e-9);
  EXPECT_NEAR(g[0][1], 2.0, 1e-9);
}

TEST(FiniteDiff, NonFiniteProbeReportsCoordinate) {
  ParameterSet<double> p;
  p.add("a", Tensor<double>(Shape{2}, 1.0));
  p.add("b", Tensor<double>(Shape{2}, 1.0));
  try {
    finite_diff_grad<double>(
        [](const ParameterSet<double>& q) { return q[1][1] > 1.0 ? INFINITY : 0.0; }, p, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.index(), 3u);
  }
  EXPECT_THROW(finite_diff_grad<double>([](const ParameterSet<double>&) { return 0.0; }, p, 0.0),
               DomainError);
}

// Every differentiable op against central differences on 100 random
// instances each.
TEST(BackwardProperty, EveryOpMatchesFiniteDifferences) {
  using Builder = std::function<Var(Tape<double>&, const ParameterSet<double>&)>;
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(4), k = 1 + rng.below(4), m = 2 + rng.below(3);
    ParameterSet<double> p;
    p.add("a", random_tensor({n, k}, rng));
    p.add("w", random_tensor({k, m}, rng));
    p.add("b", random_tensor({m}, rng));
    const Tensor<double> anchor = random_tensor({k, m}, rng);
    Tensor<double> weight = random_tensor({k, m}, rng);
    weight.array() = weight.array().abs();
    const auto y = random_labels(n, static_cast<int>(m), rng);

    const std::vector<Builder> graphs = {
        [](Tape<double>& t, const ParameterSet<double>& q) {
          return t.sum(t.matmul(t.parameter(q, 0), t.parameter(q, 1)));
        },
        [](Tape<double>& t, const ParameterSet<double>& q) {
          Var z = t.add_bias(t.matmul(t.parameter(q, 0), t.parameter(q, 1)), t.parameter(q, 2));
          return t.half_squared_norm(t.relu(z));
        },
        [&y](Tape<double>& t, const ParameterSet<double>& q) {
          Var z = t.add_bias(t.matmul(t.parameter(q, 0), t.parameter(q, 1)), t.parameter(q, 2));
          return t.softmax_cross_entropy(z, y);
        },
        [&](Tape<double>& t, const ParameterSet<double>& q) {
          Var d = t.weighted_squared_distance(t.parameter(q, 1), anchor, weight, 0.7);
          return t.add(d, t.scale(t.sum(t.parameter(q, 2)), -1.3));
        },
    };
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
      Tape<double> tape;
      Var loss = graphs[gi](tape, p);
      auto g = tape.backward(loss, p);
      auto fd = finite_diff_grad<double>(
          [&](const ParameterSet<double>& q) {
            Tape<double> t;
            return t.value(graphs[gi](t, q)).item();
          },
          p, 1e-5);
      ASSERT_LT(max_relative_error(g, fd), 1e-4) << "trial " << trial << " graph " << gi;
    }
  }
}

}  // namespace
}  // namespace nvrm
