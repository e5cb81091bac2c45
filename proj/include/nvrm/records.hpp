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

// Metric records and their CSV / JSONL encodings.
//
// CSV header: run_id,seed,kind,index,metric,value,timestamp
// JSONL uses the same field names. Doubles are written in shortest
// round-trip form, so parsing an emitted file reproduces the values exactly.

#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "nvrm/errors.hpp"

namespace nvrm {

struct MetricRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string kind;
  std::int64_t index = 0;  // step, epoch or task, depending on the metric
  std::string metric;
  double value = 0;
  std::string timestamp;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

enum class RecordFormat { kCsv, kJsonl };

inline RecordFormat parse_record_format(const std::string& s) {
  if (s == "csv") return RecordFormat::kCsv;
  if (s == "jsonl") return RecordFormat::kJsonl;
  throw ConfigError("unknown record format '" + s + "' (expected csv|jsonl)");
}

inline const char* kCsvHeader = "run_id,seed,kind,index,metric,value,timestamp";

/// UTC wall-clock time, ISO 8601 with milliseconds.
inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

template <typename N>
N parse_number(const std::string& s, const char* field) {
  N v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw IoError(std::string("malformed ") + field + " '" + s + "'");
  return v;
}

}  // namespace detail

inline std::string to_csv_row(const MetricRecord& r) {
  return detail::csv_field(r.run_id) + "," + std::to_string(r.seed) + "," + detail::csv_field(r.kind) +
         "," + std::to_string(r.index) + "," + detail::csv_field(r.metric) + "," +
         detail::format_double(r.value) + "," + detail::csv_field(r.timestamp);
}

inline nlohmann::json to_json(const MetricRecord& r) {
  return {{"run_id", r.run_id}, {"seed", r.seed},   {"kind", r.kind},          {"index", r.index},
          {"metric", r.metric}, {"value", r.value}, {"timestamp", r.timestamp}};
}

inline MetricRecord record_from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.kind = j.at("kind").get<std::string>();
  r.index = j.at("index").get<std::int64_t>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  r.timestamp = j.at("timestamp").get<std::string>();
  return r;
}

/// Appends records to a file as they arrive, flushing after each one so a
/// failed run still leaves every record written so far.
class RecordWriter {
 public:
  /// With `append`, rows go after the existing content and a CSV header is
  /// only written if the file is empty.
  RecordWriter(const std::string& path, RecordFormat format, bool append = false) : format_(format) {
    bool empty = true;
    if (append) {
      std::ifstream probe(path, std::ios::ate);
      empty = !probe || probe.tellg() == 0;
    }
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
    if (format_ == RecordFormat::kCsv && empty) out_ << kCsvHeader << '\n';
    out_.flush();
  }

  void append(const MetricRecord& r) {
    if (format_ == RecordFormat::kCsv)
      out_ << to_csv_row(r) << '\n';
    else
      out_ << to_json(r).dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("record write failed");
    ++count_;
  }

  std::size_t count() const { return count_; }

 private:
  RecordFormat format_;
  std::ofstream out_;
  std::size_t count_ = 0;
};

inline void emit_records(const std::vector<MetricRecord>& records, RecordFormat format,
                         const std::string& path) {
  if (records.empty()) throw ConfigError("emit_records: no records to write");
  RecordWriter w(path, format);
  for (const auto& r : records) w.append(r);
}

inline std::vector<MetricRecord> parse_records_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw IoError("missing or wrong CSV header");
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 7) throw IoError("CSV row has " + std::to_string(f.size()) + " fields");
    MetricRecord r;
    r.run_id = f[0];
    r.seed = detail::parse_number<std::uint64_t>(f[1], "seed");
    r.kind = f[2];
    r.index = detail::parse_number<std::int64_t>(f[3], "index");
    r.metric = f[4];
    r.value = detail::parse_number<double>(f[5], "value");
    r.timestamp = f[6];
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<MetricRecord> parse_records_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

inline std::vector<MetricRecord> read_records(const std::string& path, RecordFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return format == RecordFormat::kCsv ? parse_records_csv(ss.str()) : parse_records_jsonl(ss.str());
}

}  // namespace nvrm
