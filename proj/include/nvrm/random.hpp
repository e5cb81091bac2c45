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

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace nvrm {

/// Seeded random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The standard distributions are implementation-defined, so the
/// variates below are derived by hand to keep results reproducible across
/// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream keyed by (seed, stream id).
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32)};
    Rng rng;
    rng.engine_.seed(seq);
    return rng;
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1).
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  /// Uniform integer on [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via a 128-layer ziggurat. The fast path consumes one
  /// 64-bit draw: bits 11..63 give the abscissa, bits 0..6 the layer.
  double normal() { return normal_with(ziggurat()); }

  /// out[i] = scale * N(0, 1). Doubles consume the stream exactly as repeated
  /// normal() calls would. Floats are produced in batches: each 64-bit draw
  /// gives two variates, one per 32-bit half (7 layer bits, 25 abscissa bits,
  /// already finer than float resolution). Halves that miss the fast path go
  /// through the wedge and tail tests once the batch is written.
  template <typename T>
  void fill_normal(std::span<T> out, double scale) {
    const Ziggurat& z = ziggurat();
    if constexpr (std::is_same_v<T, float>) {
      // A half h gives layer h & 0x7f and signed abscissa s = h >> 7 (as
      // int32), u = s / 2^24. The fast path |u| < ratio is |s| < bound.
      float w[128];
      for (int l = 0; l < 128; ++l) w[l] = static_cast<float>(scale * z.x[l] * 0x1.0p-24);
      constexpr std::size_t kBatch = 256;
      std::uint32_t halves[2 * kBatch];
      std::uint64_t miss[2 * kBatch / 64];
      std::size_t i = 0;
      while (out.size() - i >= 2) {
        const std::size_t m = std::min(kBatch, (out.size() - i) / 2);
        for (std::size_t j = 0; j < m; ++j) {
          const std::uint64_t b = engine_();
          halves[2 * j] = static_cast<std::uint32_t>(b);
          halves[2 * j + 1] = static_cast<std::uint32_t>(b >> 32);
        }
        float* dst = out.data() + i;
        ziggurat_fast_path(z, w, halves, 2 * m, dst, miss);
        for (std::size_t word = 0; word < (2 * m + 63) / 64; ++word)
          for (std::uint64_t left = miss[word]; left != 0; left &= left - 1) {
            const std::size_t k = 64 * word + static_cast<std::size_t>(std::countr_zero(left));
            dst[k] = static_cast<float>(scale * edge_or_redraw(z, halves[k]));
          }
        i += 2 * m;
      }
      if (i < out.size()) out[i] = static_cast<float>(scale * normal_with(z));
    } else {
      for (auto& v : out) v = static_cast<T>(scale * normal_with(z));
    }
  }

  /// Laplace(0, scale) by inverse CDF.
  double laplace(double scale) {
    const double u = uniform_open() - 0.5;
    return u < 0 ? scale * std::log1p(2.0 * u) : -scale * std::log1p(-2.0 * u);
  }

  /// Full generator state.
  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng rng;
    std::istringstream is(text);
    is >> rng.engine_;
    if (!is) throw std::invalid_argument("malformed Rng state");
    return rng;
  }

  /// Fisher-Yates permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
    return p;
  }

 private:
  // Layer edges x[0..128] (x[0] is the base strip's equivalent width, x[1] = R,
  // x[128] = 0) and ratio[i] = x[i+1] / x[i].
  struct Ziggurat {
    static constexpr double kR = 3.442619855899;
    static constexpr double kV = 9.91256303526217e-3;
    double x[129];
    double ratio[128];
    std::int32_t bound[128];  // |s| < bound[i] iff |s| / 2^24 < ratio[i]

    Ziggurat() {
      double f = std::exp(-0.5 * kR * kR);
      x[0] = kV / f;
      x[1] = kR;
      x[128] = 0.0;
      for (int i = 2; i < 128; ++i) {
        x[i] = std::sqrt(-2.0 * std::log(kV / x[i - 1] + f));
        f = std::exp(-0.5 * x[i] * x[i]);
      }
      for (int i = 0; i < 128; ++i) {
        ratio[i] = x[i + 1] / x[i];
        bound[i] = static_cast<std::int32_t>(std::ceil(ratio[i] * 0x1.0p24));
      }
    }
  };

  static const Ziggurat& ziggurat() {
    static const Ziggurat z;
    return z;
  }

  // dst[k] = s_k * w[layer_k] for every half; bit k of the miss bitset flags
  // the halves outside their layer's rectangle. Both paths round identically.
  static void ziggurat_fast_path(const Ziggurat& z, const float* w, const std::uint32_t* halves,
                                 std::size_t n, float* dst, std::uint64_t* miss) {
    std::fill_n(miss, (n + 63) / 64, std::uint64_t{0});
    std::size_t k = 0;
#if defined(__AVX512F__)
    const __m512i low7 = _mm512_set1_epi32(0x7f);
    for (; k + 16 <= n; k += 16) {
      const __m512i h = _mm512_loadu_si512(halves + k);
      const __m512i sgn = _mm512_srai_epi32(h, 7);
      const __m512i layer = _mm512_and_si512(h, low7);
      const __m512 scaled = _mm512_mul_ps(_mm512_cvtepi32_ps(sgn), _mm512_i32gather_ps(layer, w, 4));
      _mm512_storeu_ps(dst + k, scaled);
      const __m512i bound = _mm512_i32gather_epi32(layer, z.bound, 4);
      const __mmask16 out = _mm512_cmpge_epi32_mask(_mm512_abs_epi32(sgn), bound);
      miss[k / 64] |= static_cast<std::uint64_t>(out) << (k % 64);
    }
#endif
    for (; k < n; ++k) {
      const std::int32_t sgn = static_cast<std::int32_t>(halves[k]) >> 7;
      const std::uint32_t layer = halves[k] & 0x7f;
      const std::int32_t mag = sgn < 0 ? -sgn : sgn;
      dst[k] = static_cast<float>(sgn) * w[layer];
      miss[k / 64] |= static_cast<std::uint64_t>(mag >= z.bound[layer]) << (k % 64);
    }
  }

  double normal_with(const Ziggurat& z) {
    for (;;) {
      const std::uint64_t bits = engine_();
      const double u = 2.0 * (static_cast<double>(bits >> 11) * 0x1.0p-53) - 1.0;
      const std::size_t i = bits & 0x7f;
      if (std::abs(u) < z.ratio[i]) [[likely]]
        return u * z.x[i];
      double x;
      if (ziggurat_edge(z, u, i, x)) return x;
    }
  }

  // Finishes a float half that missed the fast path.
  double edge_or_redraw(const Ziggurat& z, std::uint32_t half) {
    const double u = static_cast<double>(static_cast<std::int32_t>(half) >> 7) * 0x1.0p-24;
    double x;
    return ziggurat_edge(z, u, half & 0x7f, x) ? x : normal_with(z);
  }

  // Slow path for a draw (u, layer i) outside the layer's rectangle: the tail
  // beyond R for the base layer, otherwise the wedge test. Returns false when
  // the draw is rejected.
  bool ziggurat_edge(const Ziggurat& z, double u, std::size_t i, double& out) {
    if (i == 0) {
      // Marsaglia's exponential method.
      double a, y;
      do {
        a = -std::log(uniform_open()) / Ziggurat::kR;
        y = -std::log(uniform_open());
      } while (2.0 * y < a * a);
      out = u < 0 ? -(Ziggurat::kR + a) : Ziggurat::kR + a;
      return true;
    }
    const double x = u * z.x[i];
    const double f0 = std::exp(-0.5 * (z.x[i] * z.x[i] - x * x));
    const double f1 = std::exp(-0.5 * (z.x[i + 1] * z.x[i + 1] - x * x));
    out = x;
    return f1 + uniform() * (f0 - f1) < 1.0;
  }

  std::mt19937_64 engine_;
};

}  // namespace nvrm
