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

// Checkpoint container, all integers and floats little-endian:
//
//   "NVRMCKPT"                     8 bytes
//   version                        u32 (= 1)
//   metadata length, bytes         u32, UTF-8 (free-form, usually JSON)
//   entry count                    u32
//   per entry:
//     name length, bytes           u32, UTF-8
//     rank                         u32
//     dims                         rank x u64
//     data                         product(dims) x f64
//
// Values are always stored as f64 regardless of the in-memory precision.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nvrm/errors.hpp"
#include "nvrm/parameters.hpp"

namespace nvrm {

inline constexpr char kCheckpointMagic[8] = {'N', 'V', 'R', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

class LeReader {
 public:
  explicit LeReader(const std::string& buf) : buf_(buf) {}

  template <typename U>
  U get(const char* what) {
    if (pos_ + sizeof(U) > buf_.size()) throw ParseError(std::string("truncated ") + what, pos_);
    unsigned char b[sizeof(U)];
    std::memcpy(b, buf_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    if (pos_ + n > buf_.size()) throw ParseError(std::string("truncated ") + what, pos_);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace detail

template <typename T>
struct Checkpoint {
  std::string metadata;
  ParameterSet<T> tensors;
};

template <typename T>
std::string encode_checkpoint(const ParameterSet<T>& tensors, const std::string& metadata = {}) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
  out += metadata;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, value] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d : value.shape()) detail::put_le<std::uint64_t>(out, d);
    for (T v : value.data()) detail::put_le<double>(out, static_cast<double>(v));
  }
  return out;
}

template <typename T>
Checkpoint<T> decode_checkpoint(const std::string& bytes) {
  detail::LeReader in(bytes);
  const std::string magic = in.bytes(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw ParseError("not a checkpoint (bad magic)", 0);
  const std::size_t version_at = in.pos();
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), version_at);
  Checkpoint<T> ck;
  ck.metadata = in.bytes(in.get<std::uint32_t>("metadata length"), "metadata");
  const auto count = in.get<std::uint32_t>("entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name = in.bytes(in.get<std::uint32_t>("name length"), "name");
    const auto rank = in.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>("dimension"));
    const std::size_t n = shape_size(shape);
    if (n > (bytes.size() - in.pos()) / sizeof(double))
      throw ParseError("truncated data for '" + name + "'", in.pos());
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(in.get<double>("data"));
    ck.tensors.add(std::move(name), Tensor<T>(std::move(shape), std::move(data)));
  }
  if (!in.done()) throw ParseError("trailing bytes after last entry", in.pos());
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& tensors,
                     const std::string& metadata = {}) {
  detail::write_file(path, encode_checkpoint(tensors, metadata));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(detail::read_file(path));
}

}  // namespace nvrm
