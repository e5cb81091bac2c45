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

// First-order optimizers and the neural-variable wrapper.
//
// Every inner optimizer is split into "compute the update delta" and "apply
// it". Plain steps add the delta to the weights. The neural-variable wrapper
// keeps the clean weights alongside the stored (perturbed) ones, adds the
// delta to the clean copy and then re-materialises stored = clean + eps_t.
// This is the same arithmetic as stored += delta + eps_t - eps_{t-1}, but it
// makes de-noising exact in floating point: stored - eps_t is never computed,
// the clean copy is simply restored.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "nvrm/errors.hpp"
#include "nvrm/parameters.hpp"
#include "nvrm/random.hpp"

namespace nvrm {

// ---------------------------------------------------------------------------
// Noise

enum class NoiseFamily { kGaussian, kLaplace, kUniform };

inline const char* to_string(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::kGaussian: return "gaussian";
    case NoiseFamily::kLaplace: return "laplace";
    case NoiseFamily::kUniform: return "uniform";
  }
  return "?";
}

inline NoiseFamily parse_noise_family(const std::string& s) {
  if (s == "gaussian") return NoiseFamily::kGaussian;
  if (s == "laplace") return NoiseFamily::kLaplace;
  if (s == "uniform") return NoiseFamily::kUniform;
  throw ConfigError("unknown noise family '" + s + "' (expected gaussian|laplace|uniform)");
}

/// Per-coordinate weight noise: N(0, b²), Laplace(0, b) or Uniform(−b, b).
struct NoiseSpec {
  NoiseFamily family = NoiseFamily::kGaussian;
  double scale = 0.0;

  void validate() const {
    if (!(scale >= 0) || !std::isfinite(scale))
      throw ConfigError("noise scale b must be a finite non-negative number");
  }

  /// Per-coordinate variance of one draw.
  double variance() const {
    switch (family) {
      case NoiseFamily::kGaussian: return scale * scale;
      case NoiseFamily::kLaplace: return 2 * scale * scale;
      case NoiseFamily::kUniform: return scale * scale / 3;
    }
    return 0;
  }

  double draw(Rng& rng) const {
    switch (family) {
      case NoiseFamily::kGaussian: return scale * rng.normal();
      case NoiseFamily::kLaplace: return rng.laplace(scale);
      case NoiseFamily::kUniform: return scale * (2 * rng.uniform() - 1);
    }
    return 0;
  }
};

using ParamMask = std::vector<bool>;

inline bool masked_in(const ParamMask& mask, std::size_t i) { return mask.empty() || mask.at(i); }

/// Overwrites `out` with i.i.d. noise. Coordinates are drawn tensor by tensor
/// in layout order; tensors excluded by `mask` are zeroed without consuming
/// random numbers. b = 0 yields exact zeros.
namespace detail {

// Element-wise passes over large tensors run in blocks of this many scalars
// so each block stays in cache across the passes. Even, so paired float
// normals line up with a single fill over the whole tensor.
inline constexpr std::size_t kBlock = 4096;

template <typename Fn>
void for_blocks(std::size_t n, Fn&& fn) {
  for (std::size_t off = 0; off < n; off += kBlock) fn(off, std::min(kBlock, n - off));
}

template <typename T>
void fill_noise(const NoiseSpec& spec, std::span<T> data, Rng& rng) {
  const double b = spec.scale;
  switch (spec.family) {
    case NoiseFamily::kGaussian:
      rng.fill_normal(data, b);
      break;
    case NoiseFamily::kLaplace:
      for (auto& v : data) v = static_cast<T>(rng.laplace(b));
      break;
    case NoiseFamily::kUniform:
      for (auto& v : data) v = static_cast<T>(b * (2 * rng.uniform() - 1));
      break;
  }
}

}  // namespace detail

template <typename T>
void sample_noise_into(const NoiseSpec& spec, ParameterSet<T>& out, Rng& rng,
                       const ParamMask& mask = {}) {
  spec.validate();
  for (std::size_t p = 0; p < out.size(); ++p) {
    if (spec.scale == 0 || !masked_in(mask, p))
      out[p].fill(T{0});
    else
      detail::fill_noise(spec, out[p].data(), rng);
  }
}

template <typename T>
ParameterSet<T> sample_noise(const NoiseSpec& spec, const ParameterSet<T>& like, Rng& rng) {
  ParameterSet<T> out = like.zeros_like();
  sample_noise_into(spec, out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// SGD

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("sgd: lr must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("sgd: momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("sgd: weight_decay must be non-negative");
  }
};

template <typename T>
struct SgdState {
  SgdConfig config;
  ParameterSet<T> velocity;
};

template <typename T>
SgdState<T> make_sgd(const SgdConfig& config, const ParameterSet<T>& params) {
  config.validate();
  return {config, params.zeros_like()};
}

namespace detail {

template <typename T>
void check_grads(const ParameterSet<T>& params, const GradientMap<T>& grads) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i >= grads.size() || grads.name(i) != params.name(i))
      throw DimensionError("missing gradient for parameter '" + params.name(i) + "'");
    if (grads[i].shape() != params[i].shape())
      throw DimensionError("gradient for '" + params.name(i) + "' has shape " +
                           shape_string(grads[i].shape()) + ", expected " +
                           shape_string(params[i].shape()));
  }
  if (grads.size() != params.size()) throw DimensionError("gradient map has extra entries");
}

}  // namespace detail

/// v <- mu v + g + wd theta;  delta = -lr v.
template <typename T>
void sgd_delta(SgdState<T>& s, const ParameterSet<T>& params, const GradientMap<T>& grads,
               ParameterSet<T>& delta, const ParamMask& mask = {}) {
  detail::check_grads(params, grads);
  const T mu = static_cast<T>(s.config.momentum), wd = static_cast<T>(s.config.weight_decay),
          lr = static_cast<T>(s.config.lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!masked_in(mask, i)) {
      delta[i].fill(T{0});
      continue;
    }
    auto v = s.velocity[i].array();
    if (wd != T{0})
      v = mu * v + grads[i].array() + wd * params[i].array();
    else
      v = mu * v + grads[i].array();
    delta[i].array() = -lr * v;
  }
}

template <typename T>
void sgd_step(SgdState<T>& s, ParameterSet<T>& params, const GradientMap<T>& grads,
              const ParamMask& mask = {}) {
  detail::check_grads(params, grads);
  const T mu = static_cast<T>(s.config.momentum), wd = static_cast<T>(s.config.weight_decay),
          lr = static_cast<T>(s.config.lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!masked_in(mask, i)) continue;
    auto v = s.velocity[i].array();
    if (wd != T{0})
      v = mu * v + grads[i].array() + wd * params[i].array();
    else
      v = mu * v + grads[i].array();
    params[i].array() += -lr * v;
  }
}

// ---------------------------------------------------------------------------
// Adam (L2 decay folded into the gradient)

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("adam: lr must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("adam: betas must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("adam: eps must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("adam: weight_decay must be non-negative");
  }
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  ParameterSet<T> first_moment;
  ParameterSet<T> second_moment;
};

template <typename T>
AdamState<T> make_adam(const AdamConfig& config, const ParameterSet<T>& params) {
  config.validate();
  return {config, 0, params.zeros_like(), params.zeros_like()};
}

namespace detail {

template <typename T>
struct AdamCoefficients {
  T b1, b2, wd, eps, corr1, corr2, lr;
};

template <typename T>
AdamCoefficients<T> adam_advance(AdamState<T>& s) {
  ++s.step;
  const auto& c = s.config;
  const auto t = static_cast<double>(s.step);
  return {static_cast<T>(c.beta1),
          static_cast<T>(c.beta2),
          static_cast<T>(c.weight_decay),
          static_cast<T>(c.eps),
          static_cast<T>(1 - std::pow(c.beta1, t)),
          static_cast<T>(1 - std::pow(c.beta2, t)),
          static_cast<T>(c.lr)};
}

// Moments and delta for elements [off, off + len) of tensor i.
template <typename T, typename Out>
void adam_block(const AdamCoefficients<T>& k, AdamState<T>& s, const Tensor<T>& param,
                const Tensor<T>& grad, std::size_t i, std::size_t off, std::size_t len, Out&& d) {
  auto m = s.first_moment[i].array().segment(off, len);
  auto v = s.second_moment[i].array().segment(off, len);
  const auto g = grad.array().segment(off, len);
  if (k.wd != T{0})
    d = g + k.wd * param.array().segment(off, len);
  else
    d = g;
  m = k.b1 * m + (T{1} - k.b1) * d;
  v = k.b2 * v + (T{1} - k.b2) * d.square();
  d = -k.lr * (m / k.corr1) / ((v / k.corr2).sqrt() + k.eps);
}

}  // namespace detail

template <typename T>
void adam_delta(AdamState<T>& s, const ParameterSet<T>& params, const GradientMap<T>& grads,
                ParameterSet<T>& delta, const ParamMask& mask = {}) {
  detail::check_grads(params, grads);
  const auto k = detail::adam_advance(s);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!masked_in(mask, i)) {
      delta[i].fill(T{0});
      continue;
    }
    detail::for_blocks(params[i].size(), [&](std::size_t off, std::size_t len) {
      detail::adam_block(k, s, params[i], grads[i], i, off, len, delta[i].array().segment(off, len));
    });
  }
}

template <typename T>
void adam_step(AdamState<T>& s, ParameterSet<T>& params, const GradientMap<T>& grads,
               const ParamMask& mask = {}) {
  detail::check_grads(params, grads);
  const auto k = detail::adam_advance(s);
  Eigen::Array<T, Eigen::Dynamic, 1> d(detail::kBlock);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!masked_in(mask, i)) continue;
    detail::for_blocks(params[i].size(), [&](std::size_t off, std::size_t len) {
      auto head = d.head(len);
      detail::adam_block(k, s, params[i], grads[i], i, off, len, head);
      params[i].array().segment(off, len) += head;
    });
  }
}

// ---------------------------------------------------------------------------
// Neural-variable wrapper

template <typename T, typename Inner>
struct NvrmState {
  Inner inner;
  NoiseSpec noise;
  ParameterSet<T> perturbation;  // eps_t
  ParameterSet<T> clean;         // stored - eps_t
  ParameterSet<T> delta;         // scratch for the inner update
  bool perturbed = false;
};

template <typename T, typename Inner>
NvrmState<T, Inner> make_nvrm(Inner inner, const NoiseSpec& noise) {
  noise.validate();
  NvrmState<T, Inner> s{std::move(inner), noise, {}, {}, {}, false};
  return s;
}

/// Starts a perturbation episode with eps_0 = 0.
template <typename T, typename Inner>
void nvrm_begin(NvrmState<T, Inner>& s, const ParameterSet<T>& params) {
  if (s.perturbed) throw StateError("nvrm_begin: state is already perturbed; finalize first");
  s.perturbation = params.zeros_like();
  s.clean = params;
  s.delta = params.zeros_like();
  s.perturbed = true;
}

namespace detail {

template <typename T>
void inner_delta(SgdState<T>& s, const ParameterSet<T>& p, const GradientMap<T>& g,
                 ParameterSet<T>& d, const ParamMask& m) {
  sgd_delta(s, p, g, d, m);
}
template <typename T>
void inner_delta(AdamState<T>& s, const ParameterSet<T>& p, const GradientMap<T>& g,
                 ParameterSet<T>& d, const ParamMask& m) {
  adam_delta(s, p, g, d, m);
}

}  // namespace detail

/// One step. `grads` must have been computed at the stored (perturbed)
/// weights. The inner optimizer sees the stored weights verbatim, then
/// stored = clean + eps_t with a fresh eps_t. Tensors excluded by `mask` are
/// neither updated nor perturbed.
template <typename T, typename Inner>
void nvrm_step(NvrmState<T, Inner>& s, ParameterSet<T>& params, const GradientMap<T>& grads,
               Rng& rng, const ParamMask& mask = {}) {
  if (!s.perturbed)
    throw StateError("nvrm_step: no active perturbation (call nvrm_begin to set eps_0 = 0)");
  require_same_layout(s.clean, params, "nvrm_step");
  s.noise.validate();
  detail::inner_delta(s.inner, params, grads, s.delta, mask);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!masked_in(mask, i)) {
      s.perturbation[i].fill(T{0});
      continue;
    }
    if (s.noise.scale == 0) {
      s.perturbation[i].fill(T{0});
      s.clean[i].array() += s.delta[i].array();
      params[i] = s.clean[i];
      continue;
    }
    detail::for_blocks(params[i].size(), [&](std::size_t off, std::size_t len) {
      auto eps = s.perturbation[i].array().segment(off, len);
      auto clean = s.clean[i].array().segment(off, len);
      detail::fill_noise(s.noise, s.perturbation[i].data().subspan(off, len), rng);
      clean += s.delta[i].array().segment(off, len);
      params[i].array().segment(off, len) = clean + eps;
    });
  }
}

/// De-noise: stored weights become the clean weights and eps is zeroed.
template <typename T, typename Inner>
void nvrm_finalize(NvrmState<T, Inner>& s, ParameterSet<T>& params) {
  if (!s.perturbed) throw StateError("nvrm_finalize: weights are already de-noised");
  require_same_layout(s.clean, params, "nvrm_finalize");
  params = s.clean;
  for (auto& e : s.perturbation) e.value.fill(T{0});
  s.perturbed = false;
}

/// Runs `eval_fn` on the de-noised weights while leaving the stored weights
/// untouched. `eval_fn` receives a const reference; writing through it is
/// detected and reported.
template <typename T, typename Inner, typename Fn>
auto with_clean_weights(const NvrmState<T, Inner>& s, const ParameterSet<T>& params, Fn&& eval_fn)
    -> std::invoke_result_t<Fn, const ParameterSet<T>&> {
  if (!s.perturbed) throw StateError("with_clean_weights: no active perturbation");
  require_same_layout(s.clean, params, "with_clean_weights");
  const ParameterSet<T> view = s.clean;
  if constexpr (std::is_void_v<std::invoke_result_t<Fn, const ParameterSet<T>&>>) {
    eval_fn(view);
    if (!(view == s.clean)) throw ContractViolation("with_clean_weights: eval_fn mutated the weights");
  } else {
    auto result = eval_fn(view);
    if (!(view == s.clean)) throw ContractViolation("with_clean_weights: eval_fn mutated the weights");
    return result;
  }
}

// ---------------------------------------------------------------------------
// Perturbed SGD: gradient noise, never removed.

template <typename T>
void psgd_step(SgdState<T>& s, const NoiseSpec& noise, ParameterSet<T>& params,
               const GradientMap<T>& grads, Rng& rng, const ParamMask& mask = {}) {
  if (noise.family != NoiseFamily::kGaussian)
    throw ConfigError("psgd_step: perturbed SGD injects Gaussian noise only");
  noise.validate();
  if (noise.scale == 0) {
    sgd_step(s, params, grads, mask);
    return;
  }
  GradientMap<T> noisy = grads;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    if (!masked_in(mask, i)) continue;
    for (auto& g : noisy[i].data()) g = static_cast<T>(g + noise.draw(rng));
  }
  sgd_step(s, params, noisy, mask);
}

// ---------------------------------------------------------------------------
// Type-erased optimizer for training loops.

enum class OptimizerKind { kSgd, kAdam, kNvrmSgd, kNvrmAdam, kPsgd };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kNvrmSgd: return "nvrm-sgd";
    case OptimizerKind::kNvrmAdam: return "nvrm-adam";
    case OptimizerKind::kPsgd: return "psgd";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "nvrm-sgd") return OptimizerKind::kNvrmSgd;
  if (s == "nvrm-adam") return OptimizerKind::kNvrmAdam;
  if (s == "psgd") return OptimizerKind::kPsgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam|nvrm-sgd|nvrm-adam|psgd)");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.1;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  NoiseSpec noise;

  SgdConfig sgd() const { return {lr, momentum, weight_decay}; }
  AdamConfig adam() const { return {lr, beta1, beta2, eps, weight_decay}; }
};

template <typename T>
class Optimizer {
 public:
  /// Builds the optimizer for `params`; neural-variable kinds start a
  /// perturbation episode immediately (eps_0 = 0).
  Optimizer(const OptimizerConfig& config, const ParameterSet<T>& params, Rng noise_rng)
      : config_(config), rng_(std::move(noise_rng)) {
    config.noise.validate();
    switch (config.kind) {
      case OptimizerKind::kSgd: state_ = make_sgd(config.sgd(), params); break;
      case OptimizerKind::kAdam: state_ = make_adam(config.adam(), params); break;
      case OptimizerKind::kPsgd:
        if (config.noise.family != NoiseFamily::kGaussian)
          throw ConfigError("psgd: noise family must be gaussian");
        state_ = make_sgd(config.sgd(), params);
        break;
      case OptimizerKind::kNvrmSgd: {
        auto s = make_nvrm<T>(make_sgd(config.sgd(), params), config.noise);
        nvrm_begin(s, params);
        state_ = std::move(s);
        break;
      }
      case OptimizerKind::kNvrmAdam: {
        auto s = make_nvrm<T>(make_adam(config.adam(), params), config.noise);
        nvrm_begin(s, params);
        state_ = std::move(s);
        break;
      }
    }
  }

  const OptimizerConfig& config() const { return config_; }
  bool is_nvrm() const {
    return config_.kind == OptimizerKind::kNvrmSgd || config_.kind == OptimizerKind::kNvrmAdam;
  }

  void set_lr(double lr) {
    config_.lr = lr;
    std::visit([lr](auto& s) { inner_config(s).lr = lr; }, state_);
  }

  void step(ParameterSet<T>& params, const GradientMap<T>& grads, const ParamMask& mask = {}) {
    std::visit(
        [&](auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, SgdState<T>>) {
            if (config_.kind == OptimizerKind::kPsgd)
              psgd_step(s, config_.noise, params, grads, rng_, mask);
            else
              sgd_step(s, params, grads, mask);
          } else if constexpr (std::is_same_v<S, AdamState<T>>) {
            adam_step(s, params, grads, mask);
          } else {
            nvrm_step(s, params, grads, rng_, mask);
          }
        },
        state_);
  }

  /// Calls fn with the weights that should be evaluated: de-noised for the
  /// neural-variable kinds, the stored weights otherwise.
  template <typename Fn>
  auto evaluate(const ParameterSet<T>& params, Fn&& fn) const {
    if (const auto* s = nvrm_sgd(); s && s->perturbed) return with_clean_weights(*s, params, fn);
    if (const auto* s = nvrm_adam(); s && s->perturbed) return with_clean_weights(*s, params, fn);
    return fn(params);
  }

  /// De-noises the stored weights (no-op for plain optimizers).
  void finalize(ParameterSet<T>& params) {
    std::visit(
        [&](auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (!std::is_same_v<S, SgdState<T>> && !std::is_same_v<S, AdamState<T>>) {
            if (s.perturbed) nvrm_finalize(s, params);
          }
        },
        state_);
  }

  /// Re-arms a finalized neural-variable optimizer with eps = 0, keeping the
  /// inner optimizer's buffers.
  void restart(const ParameterSet<T>& params) {
    std::visit(
        [&](auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (!std::is_same_v<S, SgdState<T>> && !std::is_same_v<S, AdamState<T>>) {
            if (!s.perturbed) nvrm_begin(s, params);
          }
        },
        state_);
  }

  /// Current eps_t, or nullptr for plain optimizers.
  const ParameterSet<T>* perturbation() const {
    if (const auto* s = nvrm_sgd()) return &s->perturbation;
    if (const auto* s = nvrm_adam()) return &s->perturbation;
    return nullptr;
  }

  /// Serialisable snapshot: optimizer buffers, eps_t and clean weights as
  /// named tensors, scalar state (step counter, RNG) as text.
  std::pair<ParameterSet<T>, std::string> export_state() const {
    ParameterSet<T> out;
    std::ostringstream meta;
    meta << "kind=" << to_string(config_.kind) << "\n";
    auto add_all = [&out](const std::string& prefix, const ParameterSet<T>& set) {
      for (const auto& [name, value] : set) out.add(prefix + "/" + name, value);
    };
    auto add_inner = [&](const auto& inner) {
      using S = std::decay_t<decltype(inner)>;
      if constexpr (std::is_same_v<S, SgdState<T>>) {
        add_all("velocity", inner.velocity);
      } else {
        add_all("adam.m", inner.first_moment);
        add_all("adam.v", inner.second_moment);
        meta << "adam.step=" << inner.step << "\n";
      }
    };
    std::visit(
        [&](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, SgdState<T>> || std::is_same_v<S, AdamState<T>>) {
            add_inner(s);
          } else {
            add_inner(s.inner);
            add_all("nvrm.eps", s.perturbation);
            add_all("nvrm.clean", s.clean);
            meta << "nvrm.perturbed=" << s.perturbed << "\n";
          }
        },
        state_);
    meta << "rng=" << rng_.serialize() << "\n";
    return {std::move(out), meta.str()};
  }

  /// Inverse of export_state() for an optimizer built with the same config.
  void import_state(const ParameterSet<T>& tensors, const std::string& metadata) {
    auto load = [&tensors](const std::string& prefix, ParameterSet<T>& set) {
      for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& src = tensors.at(prefix + "/" + set.name(i));
        if (src.shape() != set[i].shape())
          throw DimensionError("optimizer state '" + prefix + "/" + set.name(i) + "' has wrong shape");
        set[i] = src;
      }
    };
    std::istringstream lines(metadata);
    std::string line, rng_text;
    std::uint64_t adam_step = 0;
    bool perturbed = false;
    while (std::getline(lines, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "kind" && value != to_string(config_.kind))
        throw ConfigError("optimizer state was saved for '" + value + "'");
      if (key == "adam.step") adam_step = std::stoull(value);
      if (key == "nvrm.perturbed") perturbed = value == "1";
      if (key == "rng") rng_text = value;
    }
    auto load_inner = [&](auto& inner) {
      using S = std::decay_t<decltype(inner)>;
      if constexpr (std::is_same_v<S, SgdState<T>>) {
        load("velocity", inner.velocity);
      } else {
        load("adam.m", inner.first_moment);
        load("adam.v", inner.second_moment);
        inner.step = adam_step;
      }
    };
    std::visit(
        [&](auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, SgdState<T>> || std::is_same_v<S, AdamState<T>>) {
            load_inner(s);
          } else {
            load_inner(s.inner);
            load("nvrm.eps", s.perturbation);
            load("nvrm.clean", s.clean);
            s.perturbed = perturbed;
          }
        },
        state_);
    if (!rng_text.empty()) rng_ = Rng::deserialize(rng_text);
  }

 private:
  using NvrmSgd = NvrmState<T, SgdState<T>>;
  using NvrmAdam = NvrmState<T, AdamState<T>>;

  static SgdConfig& inner_config(SgdState<T>& s) { return s.config; }
  static AdamConfig& inner_config(AdamState<T>& s) { return s.config; }
  template <typename Inner>
  static auto& inner_config(NvrmState<T, Inner>& s) {
    return inner_config(s.inner);
  }

  const NvrmSgd* nvrm_sgd() const { return std::get_if<NvrmSgd>(&state_); }
  const NvrmAdam* nvrm_adam() const { return std::get_if<NvrmAdam>(&state_); }

  OptimizerConfig config_;
  Rng rng_;
  std::variant<SgdState<T>, AdamState<T>, NvrmSgd, NvrmAdam> state_;
};

/// Step decay: lr / 10^floor(epoch / period); period 0 disables decay.
inline double step_decay_lr(double initial, std::size_t period, std::size_t epoch) {
  if (period == 0) return initial;
  return initial / std::pow(10.0, static_cast<double>(epoch / period));
}

}  // namespace nvrm
