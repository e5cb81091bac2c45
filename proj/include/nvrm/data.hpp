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
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "nvrm/checkpoint.hpp"
#include "nvrm/errors.hpp"
#include "nvrm/random.hpp"
#include "nvrm/tensor.hpp"

namespace nvrm {

template <typename T>
struct Dataset {
  Tensor<T> images;         // (n, d)
  std::vector<int> labels;  // length n
  int num_classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return images.cols(); }

  void validate() const {
    if (labels.empty()) throw DimensionError("dataset is empty");
    if (images.rank() != 2 || images.dim(0) != labels.size())
      throw DimensionError("dataset images " + shape_string(images.shape()) + " vs " +
                           std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw DimensionError("label " + std::to_string(y) + " outside [0, " +
                             std::to_string(num_classes) + ")");
  }
};

// ---------------------------------------------------------------------------
// IDX files

inline constexpr std::uint32_t kIdxImagesMagic = 2051;
inline constexpr std::uint32_t kIdxLabelsMagic = 2049;

namespace detail {

inline std::uint32_t read_be32(const std::string& buf, std::size_t at, const char* what) {
  if (at + 4 > buf.size()) throw ParseError(std::string("truncated IDX header (") + what + ")", at);
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + at);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

}  // namespace detail

/// Decoded IDX image file: n images of rows x cols unsigned bytes.
struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(const std::string& buf) {
  const auto magic = detail::read_be32(buf, 0, "magic");
  if (magic != kIdxImagesMagic)
    throw ParseError("IDX image file has magic " + std::to_string(magic) + ", expected 2051", 0);
  IdxImages out;
  out.count = detail::read_be32(buf, 4, "count");
  out.rows = detail::read_be32(buf, 8, "rows");
  out.cols = detail::read_be32(buf, 12, "cols");
  const std::size_t need = out.count * out.rows * out.cols;
  if (buf.size() - 16 < need)
    throw ParseError("truncated IDX image data: need " + std::to_string(need) + " bytes", buf.size());
  if (buf.size() - 16 > need) throw ParseError("trailing bytes in IDX image file", 16 + need);
  out.pixels.assign(buf.begin() + 16, buf.end());
  return out;
}

inline std::vector<int> parse_idx_labels(const std::string& buf) {
  const auto magic = detail::read_be32(buf, 0, "magic");
  if (magic != kIdxLabelsMagic)
    throw ParseError("IDX label file has magic " + std::to_string(magic) + ", expected 2049", 0);
  const std::size_t n = detail::read_be32(buf, 4, "count");
  if (buf.size() - 8 < n)
    throw ParseError("truncated IDX label data: need " + std::to_string(n) + " bytes", buf.size());
  if (buf.size() - 8 > n) throw ParseError("trailing bytes in IDX label file", 8 + n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<unsigned char>(buf[8 + i]);
  return labels;
}

/// Loads an IDX image/label pair; pixels are scaled to [0, 1].
template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path,
                    int num_classes = 10) {
  const IdxImages img = parse_idx_images(detail::read_file(images_path));
  std::vector<int> labels = parse_idx_labels(detail::read_file(labels_path));
  if (labels.size() != img.count)
    throw ParseError("image file has " + std::to_string(img.count) + " items but label file has " +
                         std::to_string(labels.size()),
                     4);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= num_classes)
      throw ParseError("label " + std::to_string(labels[i]) + " exceeds class count", 8 + i);
  Dataset<T> ds;
  ds.num_classes = num_classes;
  ds.images = Tensor<T>(Shape{img.count, img.rows * img.cols});
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    ds.images[i] = static_cast<T>(img.pixels[i]) / T{255};
  ds.labels = std::move(labels);
  return ds;
}

/// Serialises images (given as bytes) and labels in IDX format.
inline std::string encode_idx_images(std::size_t count, std::size_t rows, std::size_t cols,
                                     const std::vector<std::uint8_t>& pixels) {
  std::string out;
  auto be32 = [&out](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
  };
  be32(kIdxImagesMagic);
  be32(static_cast<std::uint32_t>(count));
  be32(static_cast<std::uint32_t>(rows));
  be32(static_cast<std::uint32_t>(cols));
  out.append(pixels.begin(), pixels.end());
  return out;
}

inline std::string encode_idx_labels(const std::vector<std::uint8_t>& labels) {
  std::string out;
  auto be32 = [&out](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
  };
  be32(kIdxLabelsMagic);
  be32(static_cast<std::uint32_t>(labels.size()));
  out.append(labels.begin(), labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename T>
Tensor<T> pixel_mean(const Dataset<T>& ds) {
  ds.validate();
  Tensor<T> mean(Shape{ds.dim()});
  std::vector<double> acc(ds.dim(), 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.dim(); ++j) acc[j] += ds.images.at(i, j);
  for (std::size_t j = 0; j < ds.dim(); ++j) mean[j] = static_cast<T>(acc[j] / static_cast<double>(ds.size()));
  return mean;
}

template <typename T>
Dataset<T> subtract_pixel_mean(Dataset<T> ds, const Tensor<T>& mean) {
  if (mean.size() != ds.dim()) throw DimensionError("pixel mean width does not match dataset");
  ds.images.matrix().rowwise() -= mean.matrix().row(0);
  return ds;
}

/// Per-pixel mean subtraction with the statistics of `train` applied to both
/// splits.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> normalize(const Dataset<T>& train, const Dataset<T>& test) {
  const Tensor<T> mean = pixel_mean(train);
  return {subtract_pixel_mean(train, mean), subtract_pixel_mean(test, mean)};
}

template <typename T>
Dataset<T> normalize(const Dataset<T>& train) {
  return subtract_pixel_mean(train, pixel_mean(train));
}

template <typename T>
Dataset<T> take_first(const Dataset<T>& ds, std::size_t n) {
  n = std::min(n, ds.size());
  Dataset<T> out;
  out.num_classes = ds.num_classes;
  out.images = slice_rows(ds.images, 0, n);
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

template <typename T>
Dataset<T> select(const Dataset<T>& ds, std::span<const std::size_t> indices) {
  Dataset<T> out;
  out.num_classes = ds.num_classes;
  out.images = gather_rows(ds.images, indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(ds.labels[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Label noise

struct CorruptedLabels {
  std::vector<int> labels;
  std::vector<bool> flipped;

  std::size_t flip_count() const {
    return static_cast<std::size_t>(std::count(flipped.begin(), flipped.end(), true));
  }
};

namespace detail {

inline void check_corruption_args(std::span<const int> labels, double rate, int num_classes) {
  if (!(rate >= 0 && rate <= 1)) throw ConfigError("corruption rate must be in [0, 1]");
  if (num_classes < 2 && rate > 0) throw ConfigError("label corruption needs at least 2 classes");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw ConfigError("label " + std::to_string(y) + " out of range");
}

}  // namespace detail

/// Each label independently replaced, with probability `rate`, by a class
/// drawn uniformly from the other num_classes - 1 classes.
inline CorruptedLabels corrupt_symmetric(std::span<const int> labels, double rate, int num_classes,
                                         Rng& rng) {
  detail::check_corruption_args(labels, rate, num_classes);
  CorruptedLabels out{{labels.begin(), labels.end()}, std::vector<bool>(labels.size(), false)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (rng.uniform() < rate) {
      const auto shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
      out.labels[i] = (labels[i] + shift) % num_classes;
      out.flipped[i] = true;
    }
  }
  return out;
}

/// Each label i independently replaced, with probability `rate`, by
/// (i + 1) mod num_classes.
inline CorruptedLabels corrupt_asymmetric(std::span<const int> labels, double rate,
                                          int num_classes, Rng& rng) {
  detail::check_corruption_args(labels, rate, num_classes);
  CorruptedLabels out{{labels.begin(), labels.end()}, std::vector<bool>(labels.size(), false)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (rng.uniform() < rate) {
      out.labels[i] = (labels[i] + 1) % num_classes;
      out.flipped[i] = true;
    }
  }
  return out;
}

/// CSV manifest with one row per sample: index,original,corrupted.
inline void write_corruption_manifest(const std::string& path, std::span<const int> original,
                                      const CorruptedLabels& corrupted) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "index,original,corrupted\n";
  for (std::size_t i = 0; i < original.size(); ++i)
    out << i << ',' << original[i] << ',' << corrupted.labels[i] << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Continual-learning task sequences

enum class TaskKind { kPermuted, kSplit };

struct TaskSequence {
  TaskKind kind = TaskKind::kPermuted;
  std::vector<std::vector<std::size_t>> permutations;  // permuted: one per task
  std::vector<std::vector<int>> class_sets;             // split: classes of each task

  std::size_t size() const {
    return kind == TaskKind::kPermuted ? permutations.size() : class_sets.size();
  }
};

/// Task 0 keeps the original pixel order; every later task gets its own
/// uniformly random pixel permutation.
inline TaskSequence make_permuted_tasks(std::size_t input_dim, std::size_t num_tasks, Rng& rng) {
  if (num_tasks < 1) throw ConfigError("need at least one task");
  TaskSequence seq;
  seq.kind = TaskKind::kPermuted;
  std::vector<std::size_t> identity(input_dim);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  seq.permutations.push_back(std::move(identity));
  for (std::size_t t = 1; t < num_tasks; ++t) seq.permutations.push_back(rng.permutation(input_dim));
  return seq;
}

template <typename T>
TaskSequence make_permuted_tasks(const Dataset<T>& ds, std::size_t num_tasks, Rng& rng) {
  return make_permuted_tasks(ds.dim(), num_tasks, rng);
}

inline std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

/// Column j of the result is column perm[j] of the input.
template <typename T>
Dataset<T> permute_pixels(const Dataset<T>& ds, std::span<const std::size_t> perm) {
  if (perm.size() != ds.dim()) throw DimensionError("permutation length does not match image width");
  Dataset<T> out;
  out.num_classes = ds.num_classes;
  out.labels = ds.labels;
  out.images = Tensor<T>(ds.images.shape());
  const std::size_t d = ds.dim();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const T* src = &ds.images.at(i, 0);
    T* dst = &out.images.at(i, 0);
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[perm[j]];
  }
  return out;
}

inline TaskSequence make_split_tasks(const std::vector<std::vector<int>>& class_sets) {
  if (class_sets.empty()) throw ConfigError("need at least one task");
  std::set<int> seen;
  for (const auto& s : class_sets) {
    if (s.empty()) throw ConfigError("split task with no classes");
    for (int c : s)
      if (!seen.insert(c).second)
        throw ConfigError("class " + std::to_string(c) + " appears in more than one split task");
  }
  TaskSequence seq;
  seq.kind = TaskKind::kSplit;
  seq.class_sets = class_sets;
  return seq;
}

template <typename T>
TaskSequence make_split_tasks(const Dataset<T>& ds, const std::vector<std::vector<int>>& class_sets) {
  for (const auto& s : class_sets)
    for (int c : s)
      if (c < 0 || c >= ds.num_classes) throw ConfigError("split class out of range");
  return make_split_tasks(class_sets);
}

/// Samples of one split task, labels remapped to their position within the
/// task's class set.
template <typename T>
Dataset<T> split_task_dataset(const Dataset<T>& ds, const TaskSequence& seq, std::size_t task) {
  const auto& classes = seq.class_sets.at(task);
  std::vector<std::size_t> idx;
  std::vector<int> remapped;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), ds.labels[i]);
    if (it != classes.end()) {
      idx.push_back(i);
      remapped.push_back(static_cast<int>(it - classes.begin()));
    }
  }
  Dataset<T> out = select(ds, idx);
  out.labels = std::move(remapped);
  out.num_classes = static_cast<int>(classes.size());
  return out;
}

/// Dataset seen by task `task` of `seq`.
template <typename T>
Dataset<T> task_dataset(const Dataset<T>& ds, const TaskSequence& seq, std::size_t task) {
  return seq.kind == TaskKind::kPermuted ? permute_pixels(ds, seq.permutations.at(task))
                                         : split_task_dataset(ds, seq, task);
}

}  // namespace nvrm
