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

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "nvrm/experiment.hpp"

namespace nvrm {
namespace {

namespace fs = std::filesystem;

// Writes a small learnable MNIST-shaped dataset: class k lights rows
// 2k..2k+1, plus pixel noise.
fs::path make_fixture_dir() {
  const fs::path dir = fs::temp_directory_path() / "nvrm_experiment_fixture";
  fs::create_directories(dir);
  auto write = [&dir](const std::string& name, const std::string& bytes) {
    std::ofstream(dir / name, std::ios::binary) << bytes;
  };
  Rng rng(123);
  auto make = [&rng](std::size_t n, std::vector<std::uint8_t>& pix, std::vector<std::uint8_t>& lab) {
    pix.assign(n * 784, 0);
    lab.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int k = static_cast<int>(i % 10);
      lab[i] = static_cast<std::uint8_t>(k);
      for (std::size_t p = 0; p < 784; ++p) {
        const std::size_t row = p / 28;
        const double base = (row / 2 == static_cast<std::size_t>(k)) ? 200.0 : 20.0;
        pix[i * 784 + p] = static_cast<std::uint8_t>(std::clamp(base + 30.0 * rng.normal(), 0.0, 255.0));
      }
    }
  };
  std::vector<std::uint8_t> pix, lab;
  make(200, pix, lab);
  write("train-images-idx3-ubyte", encode_idx_images(200, 28, 28, pix));
  write("train-labels-idx1-ubyte", encode_idx_labels(lab));
  make(100, pix, lab);
  write("t10k-images-idx3-ubyte", encode_idx_images(100, 28, 28, pix));
  write("t10k-labels-idx1-ubyte", encode_idx_labels(lab));
  return dir;
}

nlohmann::json base_config(const std::string& output) {
  static const fs::path dir = make_fixture_dir();
  return {{"kind", "train"},
          {"seed", 3},
          {"output", output},
          {"precision", "f64"},
          {"data", {{"dir", dir.string()}}},
          {"model", {{"layers", {784, 16, 10}}}},
          {"optimizer", {{"name", "sgd"}, {"lr", 0.05}, {"momentum", 0.9}, {"batch_size", 32}, {"epochs", 2}}}};
}

std::string temp_output(const std::string& name) {
  const auto p = (fs::temp_directory_path() / name).string();
  fs::remove(p);
  fs::remove(p + ".config.json");
  return p;
}

using Key = std::tuple<std::int64_t, std::string>;

std::map<Key, double> values(const std::vector<MetricRecord>& rs) {
  std::map<Key, double> out;
  for (const auto& r : rs) out[{r.index, r.metric}] = r.value;
  return out;
}

std::string config_error(const nlohmann::json& j) {
  try {
    parse_experiment_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

TEST(ExperimentConfig, CollectsEveryInvalidField) {
  auto j = base_config("x.csv");
  j["bogus"] = 1;
  j["optimizer"]["lr"] = -1;
  j["optimizer"]["momentum"] = "high";
  j["noise"] = {{"family", "cauchy"}};
  const std::string msg = config_error(j);
  EXPECT_NE(msg.find("bogus: unknown field"), std::string::npos) << msg;
  EXPECT_NE(msg.find("optimizer.lr"), std::string::npos) << msg;
  EXPECT_NE(msg.find("optimizer.momentum: wrong type"), std::string::npos) << msg;
  EXPECT_NE(msg.find("noise.family"), std::string::npos) << msg;
}

TEST(ExperimentConfig, RequiresKindAndSeed) {
  const std::string msg = config_error(nlohmann::json::object());
  EXPECT_NE(msg.find("kind: required"), std::string::npos) << msg;
  EXPECT_NE(msg.find("seed: required"), std::string::npos) << msg;
  EXPECT_NE(config_error({{"kind", "dance"}, {"seed", 0}}).find("unknown experiment"), std::string::npos);
}

TEST(ExperimentConfig, KindSpecificChecks) {
  auto j = base_config("x.csv");
  j["kind"] = "continual";
  j["continual"] = {{"tasks", "split"}, {"class_sets", {{0, 1}, {1, 2}}}};
  const std::string msg = config_error(j);
  EXPECT_NE(msg.find("model.heads"), std::string::npos) << msg;
  EXPECT_NE(msg.find("class 1 repeated"), std::string::npos) << msg;

  auto nv = base_config("x.csv");
  nv["kind"] = "nv-estimate";
  EXPECT_NE(config_error(nv).find("nv.prior_sigma"), std::string::npos);
  nv["nv"] = {{"prior_sigma", 100.0}};
  EXPECT_EQ(config_error(nv), "");

  auto rob = base_config("x.csv");
  rob["kind"] = "robustness";
  rob["robustness"] = {{"scales", {0.02, 0.01}}};
  EXPECT_NE(config_error(rob).find("strictly increasing"), std::string::npos);
}

TEST(ExperimentConfig, HashIgnoresSeedAndOutput) {
  const auto a = parse_experiment_config(base_config("a.csv"));
  auto jb = base_config("b.jsonl");
  jb["seed"] = 99;
  jb["format"] = "jsonl";
  jb["trials"] = 4;
  const auto b = parse_experiment_config(jb);
  EXPECT_EQ(config_hash(a), config_hash(b));
  auto jc = base_config("a.csv");
  jc["optimizer"]["lr"] = 0.02;
  EXPECT_NE(config_hash(a), config_hash(parse_experiment_config(jc)));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_EQ(make_run_id(a, 7), config_hash(a) + "-s7");
}

TEST(ExperimentConfig, JsonRoundTrip) {
  auto j = base_config("a.csv");
  j["noise"] = {{"family", "laplace"}, {"b", 0.03}};
  j["corruption"] = {{"type", "asymmetric"}, {"rate", 0.2}};
  const auto c = parse_experiment_config(j);
  const auto again = parse_experiment_config(config_to_json(c));
  EXPECT_EQ(config_to_json(again), config_to_json(c));
  EXPECT_EQ(config_hash(again), config_hash(c));
}

TEST(RunExperiment, TrainEmitsPerEpochRecords) {
  const auto out = temp_output("nvrm_train.csv");
  const auto cfg = parse_experiment_config(base_config(out));
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(cfg, log));
  const auto v = values(read_records(out, RecordFormat::kCsv));
  for (std::int64_t e : {1, 2})
    for (const char* m : {"train_acc", "test_acc", "gen_gap", "train_loss", "lr"})
      EXPECT_TRUE(v.count({e, m})) << m << " epoch " << e;
  EXPECT_DOUBLE_EQ(v.at({2, "gen_gap"}), v.at({2, "train_acc"}) - v.at({2, "test_acc"}));
  EXPECT_GT(v.at({2, "test_acc"}), 0.5);
  EXPECT_EQ(v.at({0, "run_complete"}), 1.0);
  EXPECT_FALSE(v.count({1, "noisy_subset_acc"}));
  std::ifstream side(out + ".config.json");
  const auto j = nlohmann::json::parse(side);
  EXPECT_EQ(j.at("config_hash"), config_hash(cfg));
}

TEST(RunExperiment, RefusesCompletedRunUnlessOverwrite) {
  const auto out = temp_output("nvrm_refuse.csv");
  auto cfg = parse_experiment_config(base_config(out));
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(cfg, log));
  EXPECT_THROW(run_experiment(cfg, log), ConfigError);
  cfg.overwrite = true;
  ASSERT_TRUE(run_experiment(cfg, log));
  EXPECT_EQ(read_records(out, RecordFormat::kCsv).size(), 11u);

  // A different seed is a different run and is appended.
  cfg.overwrite = false;
  cfg.seed = 4;
  ASSERT_TRUE(run_experiment(cfg, log));
  EXPECT_EQ(read_records(out, RecordFormat::kCsv).size(), 22u);
}

TEST(RunExperiment, TrialsUseConsecutiveSeeds) {
  const auto out = temp_output("nvrm_trials.jsonl");
  auto j = base_config(out);
  j["trials"] = 2;
  j["format"] = "jsonl";
  j["optimizer"]["epochs"] = 1;
  const auto cfg = parse_experiment_config(j);
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(cfg, log));
  std::set<std::string> ids;
  std::set<std::uint64_t> seeds;
  for (const auto& r : read_records(out, RecordFormat::kJsonl)) {
    ids.insert(r.run_id);
    seeds.insert(r.seed);
  }
  EXPECT_EQ(ids, (std::set<std::string>{make_run_id(cfg, 3), make_run_id(cfg, 4)}));
  EXPECT_EQ(seeds, (std::set<std::uint64_t>{3, 4}));
}

TEST(RunExperiment, SameSeedReproducesMetrics) {
  const auto a = temp_output("nvrm_det_a.csv"), b = temp_output("nvrm_det_b.csv");
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(parse_experiment_config(base_config(a)), log));
  ASSERT_TRUE(run_experiment(parse_experiment_config(base_config(b)), log));
  EXPECT_EQ(values(read_records(a, RecordFormat::kCsv)), values(read_records(b, RecordFormat::kCsv)));
}

TEST(RunExperiment, ZeroNoiseNvrmMatchesPlainOptimizer) {
  for (const char* inner : {"sgd", "adam"}) {
    const auto a = temp_output("nvrm_plain.csv"), b = temp_output("nvrm_b0.csv");
    auto plain = base_config(a);
    plain["optimizer"]["name"] = inner;
    plain["optimizer"]["lr"] = std::string(inner) == "adam" ? 1e-3 : 0.01;
    auto nv = plain;
    nv["output"] = b;
    nv["optimizer"]["name"] = std::string("nvrm-") + inner;
    nv["noise"] = {{"b", 0.0}};
    std::ostringstream log;
    ASSERT_TRUE(run_experiment(parse_experiment_config(plain), log));
    ASSERT_TRUE(run_experiment(parse_experiment_config(nv), log));
    EXPECT_EQ(values(read_records(a, RecordFormat::kCsv)), values(read_records(b, RecordFormat::kCsv))) << inner;
  }
}

TEST(RunExperiment, CorruptedRunsReportSubsets) {
  const auto out = temp_output("nvrm_corrupt.csv");
  auto j = base_config(out);
  j["corruption"] = {{"type", "symmetric"}, {"rate", 0.4}};
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(parse_experiment_config(j), log));
  const auto v = values(read_records(out, RecordFormat::kCsv));
  for (const char* m : {"clean_subset_acc", "noisy_subset_acc", "noisy_subset_true_acc"})
    EXPECT_TRUE(v.count({2, m})) << m;
}

TEST(RunExperiment, ResumeContinuesBitIdentically) {
  const auto ck = temp_output("nvrm_resume.ckpt");
  auto j = base_config("unused.csv");
  j["optimizer"] = {{"name", "nvrm-adam"}, {"lr", 1e-3}, {"batch_size", 32}, {"epochs", 3}};
  j["noise"] = {{"b", 0.02}};
  j["checkpoint"] = ck;
  auto cfg = parse_experiment_config(j);
  const auto data = load_mnist<double>(cfg.data);

  std::map<Key, double> full;
  train_classifier(cfg, 3, data, [&](std::int64_t i, const std::string& m, double v) { full[{i, m}] = v; });

  struct Interrupted {};
  std::map<Key, double> resumed;
  auto crashing = [&](std::int64_t i, const std::string& m, double v) {
    if (i == 2) throw Interrupted{};
    resumed[{i, m}] = v;
  };
  EXPECT_THROW(train_classifier(cfg, 3, data, crashing), Interrupted);
  ASSERT_TRUE(fs::exists(ck + ".state"));
  cfg.resume = true;
  train_classifier(cfg, 3, data, [&](std::int64_t i, const std::string& m, double v) {
    EXPECT_GE(i, 2);
    resumed[{i, m}] = v;
  });
  EXPECT_EQ(resumed, full);
  EXPECT_FALSE(fs::exists(ck + ".state"));
}

TEST(RunExperiment, RobustnessReusesCheckpoint) {
  const auto ck = temp_output("nvrm_rob.ckpt");
  const auto out = temp_output("nvrm_rob.csv");
  auto train = base_config(temp_output("nvrm_rob_train.csv"));
  train["checkpoint"] = ck;
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(parse_experiment_config(train), log));
  const auto trained = values(read_records(train["output"].get<std::string>(), RecordFormat::kCsv));

  auto rob = train;
  rob["output"] = out;
  rob["kind"] = "robustness";
  rob["robustness"] = {{"scales", {0.0, 0.05}}, {"trials", 3}};
  ASSERT_TRUE(run_experiment(parse_experiment_config(rob), log));
  const auto v = values(read_records(out, RecordFormat::kCsv));
  EXPECT_FALSE(v.count({1, "train_acc"}));  // loaded, not retrained
  EXPECT_EQ(v.at({0, "mean_acc"}), trained.at({2, "test_acc"}));
  EXPECT_EQ(v.at({0, "std_acc"}), 0.0);
  EXPECT_EQ(v.at({1, "scale"}), 0.05);

  auto wrong = rob;
  wrong["model"]["layers"] = {784, 8, 10};
  wrong["output"] = temp_output("nvrm_rob_wrong.csv");
  EXPECT_THROW(run_experiment(parse_experiment_config(wrong), log), DimensionError);
}

TEST(RunExperiment, NvEstimateRecords) {
  const auto out = temp_output("nvrm_nv.csv");
  auto j = base_config(out);
  j["kind"] = "nv-estimate";
  j["optimizer"]["weight_decay"] = 1e-4;
  j["nv"] = {{"scales", {0.01, 0.1}}, {"samples", 10}};
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(parse_experiment_config(j), log));
  const auto v = values(read_records(out, RecordFormat::kCsv));
  for (std::int64_t i : {0, 1})
    for (const char* m : {"b", "delta", "half_width", "kl", "pac_bayes_bound"}) EXPECT_TRUE(v.count({i, m})) << m;
  EXPECT_LT(v.at({0, "delta"}), v.at({1, "delta"}));
}

TEST(RunExperiment, ContinualEmitsTaskMatrix) {
  const auto out = temp_output("nvrm_cont.csv");
  auto j = base_config(out);
  j["kind"] = "continual";
  j["continual"] = {{"tasks", "permuted"}, {"num_tasks", 2}};
  std::ostringstream log;
  ASSERT_TRUE(run_experiment(parse_experiment_config(j), log));
  const auto v = values(read_records(out, RecordFormat::kCsv));
  EXPECT_TRUE(v.count({0, "task0_acc"}));
  EXPECT_FALSE(v.count({0, "task1_acc"}));
  EXPECT_EQ(v.at({1, "base_acc"}), v.at({1, "task0_acc"}));
  EXPECT_DOUBLE_EQ(v.at({1, "mean_acc"}), 0.5 * (v.at({1, "task0_acc"}) + v.at({1, "task1_acc"})));
}

TEST(RunExperiment, GradCheckPasses) {
  const auto out = temp_output("nvrm_gc.csv");
  const auto cfg = parse_experiment_config({{"kind", "grad-check"}, {"seed", 1}, {"output", out},
                                            {"grad_check", {{"instances", 20}}}});
  std::ostringstream log;
  EXPECT_TRUE(run_experiment(cfg, log));
  EXPECT_NE(log.str().find("max relative error"), std::string::npos);
  const auto v = values(read_records(out, RecordFormat::kCsv));
  EXPECT_LT(v.at({0, "max_rel_error"}), 1e-4);
  EXPECT_EQ(v.at({0, "passed"}), 1.0);
}

TEST(RunExperiment, MissingDataIsIoError) {
  auto j = base_config(temp_output("nvrm_missing.csv"));
  j["data"]["dir"] = "/nonexistent/nvrm";
  std::ostringstream log;
  EXPECT_THROW(run_experiment(parse_experiment_config(j), log), IoError);
}

}  // namespace
}  // namespace nvrm
