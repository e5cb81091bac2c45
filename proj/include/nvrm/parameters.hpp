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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nvrm/errors.hpp"
#include "nvrm/tensor.hpp"

namespace nvrm {

/// Ordered, named collection of tensors. Used both for trainable weights and
/// for anything that mirrors them (gradients, optimizer buffers, noise).
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  std::size_t add(std::string name, Tensor<T> value) {
    if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  Tensor<T>& operator[](std::size_t i) { return entries_[i].value; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_[i].value; }
  const std::string& name(std::size_t i) const { return entries_[i].name; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  Tensor<T>& at(const std::string& name) {
    auto i = find(name);
    if (!i) throw ConfigError("no parameter named '" + name + "'");
    return entries_[*i].value;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->at(name);
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Total number of scalar coordinates.
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Zero-filled set with the same names and shapes.
  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& e : entries_) out.entries_.push_back({e.name, Tensor<T>::zeros_like(e.value)});
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].value.shape() != other.entries_[i].value.shape())
        return false;
    return true;
  }

  /// Coordinate i of the flattened concatenation, in entry order.
  T& flat(std::size_t i) {
    for (auto& e : entries_) {
      if (i < e.value.size()) return e.value[i];
      i -= e.value.size();
    }
    throw DimensionError("flat index out of range");
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
        return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

/// Gradients share the parameter layout.
template <typename T>
using GradientMap = ParameterSet<T>;

template <typename T>
void require_same_layout(const ParameterSet<T>& a, const ParameterSet<T>& b, const char* what) {
  if (a.size() != b.size())
    throw DimensionError(std::string(what) + ": expected " + std::to_string(a.size()) +
                         " tensors, got " + std::to_string(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i)) throw DimensionError(std::string(what) + ": missing '" + a.name(i) + "'");
    if (a[i].shape() != b[i].shape())
      throw DimensionError(std::string(what) + ": '" + a.name(i) + "' has shape " +
                           shape_string(b[i].shape()) + ", expected " + shape_string(a[i].shape()));
  }
}

/// Largest absolute coordinate difference between two sets of equal layout.
template <typename T>
double max_abs_diff(const ParameterSet<T>& a, const ParameterSet<T>& b) {
  require_same_layout(a, b, "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].size() > 0)
      m = std::max(m, static_cast<double>((a[i].array() - b[i].array()).abs().maxCoeff()));
  return m;
}

}  // namespace nvrm
