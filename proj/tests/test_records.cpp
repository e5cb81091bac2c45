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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nvrm/checkpoint.hpp"
#include "nvrm/records.hpp"

namespace nvrm {
namespace {

namespace fs = std::filesystem;

std::vector<MetricRecord> sample_records() {
  return {
      {"abc123-s7", 7, "train", 0, "train_acc", 0.1 + 0.2, "2026-01-01T00:00:00.000Z"},
      {"abc123-s7", 7, "train", 1, "test_acc", 1.0 / 3.0, "2026-01-01T00:00:01.000Z"},
      {"abc123-s7", 7, "train", 2, "gen_gap", -1e-300, "2026-01-01T00:00:02.000Z"},
      {"odd,\"id\"", 18446744073709551615ull, "continual", -4, "base_acc", 5e-324, "t"},
  };
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Records, OneRecordGivesHeaderAndOneRow) {
  const auto path = (fs::temp_directory_path() / "nvrm_one.csv").string();
  emit_records({sample_records()[0]}, RecordFormat::kCsv, path);
  const auto text = slurp(path);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_EQ(text.substr(0, text.find('\n')), "run_id,seed,kind,index,metric,value,timestamp");
  EXPECT_NE(text.find("0.30000000000000004"), std::string::npos);
  fs::remove(path);
}

TEST(Records, CsvAndJsonlRoundTripExactly) {
  const auto records = sample_records();
  for (auto format : {RecordFormat::kCsv, RecordFormat::kJsonl}) {
    const auto path = (fs::temp_directory_path() / "nvrm_roundtrip.out").string();
    emit_records(records, format, path);
    EXPECT_EQ(read_records(path, format), records);
    fs::remove(path);
  }
}

TEST(Records, FormatsCarryTheSameMetricValues) {
  const auto records = sample_records();
  const auto csv = (fs::temp_directory_path() / "nvrm_same.csv").string();
  const auto jsonl = (fs::temp_directory_path() / "nvrm_same.jsonl").string();
  emit_records(records, RecordFormat::kCsv, csv);
  emit_records(records, RecordFormat::kJsonl, jsonl);
  auto pairs = [](const std::vector<MetricRecord>& rs) {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& r : rs) out.emplace_back(r.metric, r.value);
    std::sort(out.begin(), out.end());
    return out;
  };
  EXPECT_EQ(pairs(read_records(csv, RecordFormat::kCsv)), pairs(read_records(jsonl, RecordFormat::kJsonl)));
  fs::remove(csv);
  fs::remove(jsonl);
}

TEST(Records, Errors) {
  EXPECT_THROW(emit_records({}, RecordFormat::kCsv, "/tmp/never.csv"), ConfigError);
  EXPECT_THROW(emit_records(sample_records(), RecordFormat::kCsv, "/nonexistent-dir/x.csv"), IoError);
  EXPECT_THROW(parse_records_csv("wrong,header\n"), IoError);
  EXPECT_THROW(parse_records_csv(std::string(kCsvHeader) + "\na,b,c\n"), IoError);
  EXPECT_THROW(parse_records_csv(std::string(kCsvHeader) + "\nr,1,k,0,m,notanumber,t\n"), IoError);
  EXPECT_THROW(parse_record_format("xml"), ConfigError);
}

TEST(Records, TimestampIsIso8601Utc) {
  const auto t = utc_timestamp();
  ASSERT_EQ(t.size(), 24u);
  EXPECT_EQ(t[4], '-');
  EXPECT_EQ(t[10], 'T');
  EXPECT_EQ(t.back(), 'Z');
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  ParameterSet<double> p;
  p.add("a", Tensor<double>(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6.25}));
  p.add("scalar", Tensor<double>::scalar(-0.0));
  p.add("empty", Tensor<double>(Shape{0, 4}));
  const auto bytes = encode_checkpoint(p, "{\"k\":1}");
  EXPECT_EQ(bytes.substr(0, 8), "NVRMCKPT");
  const auto ck = decode_checkpoint<double>(bytes);
  EXPECT_EQ(ck.metadata, "{\"k\":1}");
  EXPECT_EQ(ck.tensors, p);
  EXPECT_TRUE(std::signbit(ck.tensors[1].item()));
  const auto f = decode_checkpoint<float>(bytes);
  EXPECT_EQ(f.tensors[0].at(1, 2), 6.25f);
}

TEST(Checkpoint, CorruptInputReportsOffsets) {
  ParameterSet<double> p;
  p.add("w", Tensor<double>(Shape{2}, 1.0));
  const auto bytes = encode_checkpoint(p);
  auto offset = [](const std::string& b) -> std::size_t {
    try {
      decode_checkpoint<double>(b);
    } catch (const ParseError& e) {
      return e.offset();
    }
    return static_cast<std::size_t>(-1);
  };
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(offset(bad), 0u);
  bad = bytes;
  bad[8] = 9;
  EXPECT_EQ(offset(bad), 8u);
  EXPECT_EQ(offset(bytes.substr(0, bytes.size() - 3)), bytes.size() - 16);  // start of the data block
  EXPECT_EQ(offset(bytes + "z"), bytes.size());
  EXPECT_THROW(load_checkpoint<double>("/nonexistent/file.ckpt"), IoError);
}

}  // namespace
}  // namespace nvrm
