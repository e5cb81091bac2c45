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

// Flatness and generalization evaluators.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "nvrm/data.hpp"
#include "nvrm/errors.hpp"
#include "nvrm/models.hpp"
#include "nvrm/optimizers.hpp"
#include "nvrm/parameters.hpp"
#include "nvrm/random.hpp"

namespace nvrm {

/// Monte-Carlo estimate of the expected loss under weight noise.
struct NvEstimate {
  double b = 0;
  double perturbed_loss = 0;  // mean of L(theta + eps)
  double clean_loss = 0;      // L(theta)
  double delta = 0;           // |perturbed_loss - clean_loss|
  std::size_t num_samples = 0;
  double standard_error = 0;  // sample std / sqrt(num_samples)
  std::size_t rejected = 0;   // perturbed draws with a non-finite loss
};

template <typename T>
using LossFn = std::function<double(const ParameterSet<T>&)>;

/// Averages loss_fn(theta + eps) over `num_samples` independent draws of eps.
/// Draws whose loss is not finite are dropped and counted in `rejected`.
template <typename T>
NvEstimate estimate_nvr(const LossFn<T>& loss_fn, const ParameterSet<T>& params,
                        const NoiseSpec& spec, std::size_t num_samples, Rng& rng) {
  if (num_samples < 2) throw DomainError("estimate_nvr: need at least 2 samples");
  spec.validate();
  NvEstimate est;
  est.b = spec.scale;
  est.clean_loss = loss_fn(params);
  ParameterSet<T> noise = params.zeros_like();
  ParameterSet<T> probe = params;
  double sum = 0, sum_sq = 0;
  std::size_t kept = 0;
  for (std::size_t s = 0; s < num_samples; ++s) {
    sample_noise_into(spec, noise, rng);
    for (std::size_t i = 0; i < params.size(); ++i)
      probe[i].array() = params[i].array() + noise[i].array();
    const double l = loss_fn(probe);
    if (!std::isfinite(l)) {
      ++est.rejected;
      continue;
    }
    ++kept;
    sum += l;
    sum_sq += l * l;
  }
  est.num_samples = kept;
  if (kept < 2) throw NumericError("estimate_nvr: fewer than 2 finite perturbed losses", kept);
  const double n = static_cast<double>(kept);
  est.perturbed_loss = sum / n;
  const double var = std::max(0.0, (sum_sq - n * est.perturbed_loss * est.perturbed_loss) / (n - 1));
  est.standard_error = std::sqrt(var / n);
  if (spec.scale == 0) {
    est.perturbed_loss = est.clean_loss;
    est.standard_error = 0;
  }
  est.delta = std::abs(est.perturbed_loss - est.clean_loss);
  return est;
}

/// Full-dataset mean cross-entropy of an FCN as a LossFn.
template <typename T>
LossFn<T> dataset_loss(const FcnConfig& model, const Dataset<T>& data, std::size_t head = 0) {
  return [&model, &data, head](const ParameterSet<T>& p) {
    return mean_cross_entropy(predict(model, p, data.images, head), data.labels);
  };
}

struct NvDelta {
  double delta = 0;
  double half_width = 0;  // 3 standard errors
  NvEstimate estimate;
};

/// Gaussian (b, delta) estimate with a 3-standard-error half-width.
template <typename T>
NvDelta estimate_nv_delta(const LossFn<T>& loss_fn, const ParameterSet<T>& params, double b,
                          std::size_t num_samples, Rng& rng) {
  NvDelta out;
  out.estimate = estimate_nvr(loss_fn, params, NoiseSpec{NoiseFamily::kGaussian, b}, num_samples, rng);
  out.delta = out.estimate.delta;
  out.half_width = 3 * out.estimate.standard_error;
  return out;
}

struct RobustnessPoint {
  double scale = 0;
  double mean_accuracy = 0;
  double std_accuracy = 0;  // sample standard deviation over trials
};

struct RobustnessCurve {
  std::vector<RobustnessPoint> points;
  std::size_t trials = 0;
};

/// Test accuracy under isotropic Gaussian weight noise of each scale. Each
/// trial perturbs a scratch copy; `params` is never written.
template <typename T>
RobustnessCurve robustness_sweep(const FcnConfig& model, const ParameterSet<T>& params,
                                 const Dataset<T>& test, std::span<const double> scales,
                                 std::size_t trials, Rng& rng, std::size_t head = 0) {
  if (trials == 0) throw DomainError("robustness_sweep: trials must be positive");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] >= 0)) throw DomainError("robustness_sweep: scales must be non-negative");
    if (i > 0 && !(scales[i] > scales[i - 1]))
      throw DomainError("robustness_sweep: scales must be strictly increasing");
  }
  RobustnessCurve curve;
  curve.trials = trials;
  ParameterSet<T> noise = params.zeros_like();
  ParameterSet<T> probe = params;
  for (double scale : scales) {
    const NoiseSpec spec{NoiseFamily::kGaussian, scale};
    std::vector<double> acc;
    for (std::size_t t = 0; t < trials; ++t) {
      sample_noise_into(spec, noise, rng);
      for (std::size_t i = 0; i < params.size(); ++i)
        probe[i].array() = params[i].array() + noise[i].array();
      acc.push_back(accuracy(predict(model, probe, test.images, head), test.labels));
    }
    // Shifted by the first trial so identical accuracies average exactly.
    double shift = 0;
    for (double a : acc) shift += a - acc[0];
    const double mean = acc[0] + shift / static_cast<double>(trials);
    double ss = 0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    const double sd = trials > 1 ? std::sqrt(ss / static_cast<double>(trials - 1)) : 0.0;
    curve.points.push_back({scale, mean, sd});
  }
  return curve;
}

/// KL(N(theta*, b² I) || N(0, sigma² I)) summed over all coordinates:
/// sum_i [ log(sigma / b) + (b² + theta_i²) / (2 sigma²) − 1/2 ].
inline double kl_gaussian_posterior_prior(std::span<const double> theta_star, double b, double sigma) {
  if (!(b > 0) || !(sigma > 0)) throw DomainError("kl_gaussian_posterior_prior: b and sigma must be positive");
  const double per_coord = std::log(sigma / b) + b * b / (2 * sigma * sigma) - 0.5;
  double sq = 0, comp = 0;  // Kahan-summed ||theta*||²
  for (double t : theta_star) {
    const double y = t * t - comp;
    const double s = sq + y;
    comp = (s - sq) - y;
    sq = s;
  }
  return static_cast<double>(theta_star.size()) * per_coord + sq / (2 * sigma * sigma);
}

template <typename T>
double kl_gaussian_posterior_prior(const ParameterSet<T>& theta_star, double b, double sigma) {
  std::vector<double> flat;
  flat.reserve(theta_star.count());
  for (const auto& e : theta_star)
    for (T v : e.value.data()) flat.push_back(static_cast<double>(v));
  return kl_gaussian_posterior_prior(flat, b, sigma);
}

/// L̂ + 4 sqrt((KL + ln(2m / confidence)) / m) + nv_delta.
inline double pac_bayes_bound(double empirical_risk, double kl, double m, double confidence,
                              double nv_delta) {
  if (!(m >= 1)) throw DomainError("pac_bayes_bound: m must be at least 1");
  if (!(confidence > 0 && confidence < 1)) throw DomainError("pac_bayes_bound: confidence must be in (0, 1)");
  if (!(kl >= 0)) throw DomainError("pac_bayes_bound: kl must be non-negative");
  if (!(nv_delta >= 0)) throw DomainError("pac_bayes_bound: nv_delta must be non-negative");
  return empirical_risk + 4 * std::sqrt((kl + std::log(2 * m / confidence)) / m) + nv_delta;
}

/// Training minus test accuracy.
inline double generalization_gap(double train_accuracy, double test_accuracy) {
  if (!(train_accuracy >= 0 && train_accuracy <= 1) || !(test_accuracy >= 0 && test_accuracy <= 1))
    throw DomainError("generalization_gap: accuracies must be in [0, 1]");
  return train_accuracy - test_accuracy;
}

/// Prior standard deviation implied by an L2 decay factor: sigma² = 1 / wd.
inline double prior_sigma_from_weight_decay(double weight_decay) {
  if (!(weight_decay > 0)) throw DomainError("prior sigma needs a positive weight decay");
  return 1.0 / std::sqrt(weight_decay);
}

}  // namespace nvrm
