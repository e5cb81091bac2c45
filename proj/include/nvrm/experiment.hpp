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

// Config-driven experiment runner.
//
// An ExperimentConfig is a JSON document. Every run is identified by
// "<config hash>-s<seed>", where the hash covers everything except the seed,
// trial count, output settings and resume/overwrite switches. Trial i of an
// invocation uses seed base_seed + i.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nvrm/analysis.hpp"
#include "nvrm/checkpoint.hpp"
#include "nvrm/continual.hpp"
#include "nvrm/data.hpp"
#include "nvrm/models.hpp"
#include "nvrm/optimizers.hpp"
#include "nvrm/records.hpp"
#include "nvrm/training.hpp"

namespace nvrm {

enum class ExperimentKind { kTrain, kContinual, kRobustness, kNvEstimate, kGradCheck };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kTrain: return "train";
    case ExperimentKind::kContinual: return "continual";
    case ExperimentKind::kRobustness: return "robustness";
    case ExperimentKind::kNvEstimate: return "nv-estimate";
    case ExperimentKind::kGradCheck: return "grad-check";
  }
  return "?";
}

inline std::optional<ExperimentKind> parse_experiment_kind(const std::string& s) {
  for (auto k : {ExperimentKind::kTrain, ExperimentKind::kContinual, ExperimentKind::kRobustness,
                 ExperimentKind::kNvEstimate, ExperimentKind::kGradCheck})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

enum class CorruptionType { kNone, kSymmetric, kAsymmetric };

struct DataSpec {
  std::string dir;  // empty: $NV_DATA_DIR
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::size_t train_subset = 0;  // 0: all; otherwise the first n samples
  bool normalize = true;         // per-pixel mean subtraction (train statistics)
};

struct TrainSpec {
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  std::size_t lr_decay_period = 0;  // divide lr by 10 every K epochs; 0 disables
  std::size_t eval_period = 1;      // evaluate every K epochs and after the last (not in JSON)
};

struct CorruptionSpec {
  CorruptionType type = CorruptionType::kNone;
  double rate = 0;
};

struct ContinualSpec {
  TaskKind tasks = TaskKind::kPermuted;
  std::size_t num_tasks = 5;
  std::size_t epochs_per_task = 1;
  std::vector<std::vector<int>> class_sets = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
};

struct RobustnessSpec {
  std::vector<double> scales = {0.01, 0.012, 0.014, 0.016, 0.018, 0.02};
  std::size_t trials = 10;
};

struct NvSpec {
  std::vector<double> scales = {0.01, 0.03, 0.05};
  std::size_t samples = 100;
  double confidence = 0.05;
  double prior_sigma = 0;        // 0: 1 / sqrt(weight decay)
  std::size_t max_examples = 0;  // training examples used for the loss; 0: all
};

struct GradCheckSpec {
  std::size_t instances = 100;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kTrain;
  std::uint64_t seed = 0;
  std::size_t trials = 1;
  std::string output = "records.csv";
  RecordFormat format = RecordFormat::kCsv;
  std::string precision = "f32";
  DataSpec data;
  FcnConfig model{{784, 1024, 1024, 10}, 1};
  OptimizerConfig optimizer;
  TrainSpec train;
  CorruptionSpec corruption;
  EwcSpec ewc;
  ContinualSpec continual;
  RobustnessSpec robustness;
  NvSpec nv;
  GradCheckSpec grad_check;
  std::string checkpoint;  // final weights; robustness / nv-estimate reuse them
  bool resume = false;     // train: continue from "<checkpoint>.state"
  bool overwrite = false;
};

// ---------------------------------------------------------------------------
// JSON encoding

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const char* corruption = c.corruption.type == CorruptionType::kNone        ? "none"
                           : c.corruption.type == CorruptionType::kSymmetric ? "symmetric"
                                                                             : "asymmetric";
  return json{
      {"kind", to_string(c.kind)},
      {"seed", c.seed},
      {"trials", c.trials},
      {"output", c.output},
      {"format", c.format == RecordFormat::kCsv ? "csv" : "jsonl"},
      {"precision", c.precision},
      {"data",
       {{"dir", c.data.dir},
        {"train_images", c.data.train_images},
        {"train_labels", c.data.train_labels},
        {"test_images", c.data.test_images},
        {"test_labels", c.data.test_labels},
        {"train_subset", c.data.train_subset},
        {"normalize", c.data.normalize}}},
      {"model", {{"layers", c.model.layer_widths}, {"heads", c.model.heads}}},
      {"optimizer",
       {{"name", to_string(c.optimizer.kind)},
        {"lr", c.optimizer.lr},
        {"momentum", c.optimizer.momentum},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"lr_decay_period", c.train.lr_decay_period}}},
      {"noise", {{"family", to_string(c.optimizer.noise.family)}, {"b", c.optimizer.noise.scale}}},
      {"corruption", {{"type", corruption}, {"rate", c.corruption.rate}}},
      {"ewc", {{"enabled", c.ewc.enabled}, {"lambda", c.ewc.lambda}, {"fisher_samples", c.ewc.fisher_samples}}},
      {"continual",
       {{"tasks", c.continual.tasks == TaskKind::kPermuted ? "permuted" : "split"},
        {"num_tasks", c.continual.num_tasks},
        {"epochs_per_task", c.continual.epochs_per_task},
        {"class_sets", c.continual.class_sets}}},
      {"robustness", {{"scales", c.robustness.scales}, {"trials", c.robustness.trials}}},
      {"nv",
       {{"scales", c.nv.scales},
        {"samples", c.nv.samples},
        {"confidence", c.nv.confidence},
        {"prior_sigma", c.nv.prior_sigma},
        {"max_examples", c.nv.max_examples}}},
      {"grad_check", {{"instances", c.grad_check.instances}}},
      {"checkpoint", c.checkpoint},
      {"resume", c.resume},
      {"overwrite", c.overwrite},
  };
}

namespace detail {

// Reads JSON fields into a config, collecting every problem instead of
// stopping at the first.
class ConfigReader {
 public:
  std::vector<std::string> errors;

  template <typename V>
  void get(const nlohmann::json& obj, const std::string& path, const char* key, V& out) {
    if (!obj.contains(key)) return;
    try {
      out = obj.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      errors.push_back(join(path, key) + ": wrong type (" + obj.at(key).dump() + ")");
    }
  }

  void known_keys(const nlohmann::json& obj, const std::string& path, std::set<std::string> keys) {
    if (!obj.is_object()) {
      errors.push_back((path.empty() ? std::string("config") : path) + ": expected an object");
      return;
    }
    for (const auto& [k, v] : obj.items())
      if (!keys.count(k)) errors.push_back(join(path, k.c_str()) + ": unknown field");
  }

  static std::string join(const std::string& path, const char* key) {
    return path.empty() ? std::string(key) : path + "." + key;
  }
};

}  // namespace detail

inline void validate_config(const ExperimentConfig& c, std::vector<std::string>& errors) {
  auto check = [&errors](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  check(c.trials >= 1, "trials: must be at least 1");
  check(c.precision == "f32" || c.precision == "f64", "precision: expected f32|f64");
  check(!c.output.empty(), "output: must not be empty");
  if (c.kind != ExperimentKind::kGradCheck) {
    try {
      c.model.validate();
    } catch (const ConfigError& e) {
      errors.push_back(std::string("model.layers: ") + e.what());
    }
    check(c.model.layer_widths.empty() || c.model.layer_widths.front() == 784,
          "model.layers: input width must be 784 for MNIST");
  }
  check(c.optimizer.lr >= 0 && std::isfinite(c.optimizer.lr), "optimizer.lr: must be finite and >= 0");
  check(c.optimizer.momentum >= 0 && c.optimizer.momentum < 1, "optimizer.momentum: must be in [0, 1)");
  check(c.optimizer.beta1 >= 0 && c.optimizer.beta1 < 1, "optimizer.beta1: must be in [0, 1)");
  check(c.optimizer.beta2 >= 0 && c.optimizer.beta2 < 1, "optimizer.beta2: must be in [0, 1)");
  check(c.optimizer.eps > 0, "optimizer.eps: must be positive");
  check(c.optimizer.weight_decay >= 0, "optimizer.weight_decay: must be >= 0");
  check(c.train.batch_size >= 1, "optimizer.batch_size: must be at least 1");
  check(c.train.epochs >= 1, "optimizer.epochs: must be at least 1");
  check(c.optimizer.noise.scale >= 0 && std::isfinite(c.optimizer.noise.scale), "noise.b: must be finite and >= 0");
  check(c.optimizer.kind != OptimizerKind::kPsgd || c.optimizer.noise.family == NoiseFamily::kGaussian,
        "noise.family: psgd requires gaussian noise");
  check(c.corruption.rate >= 0 && c.corruption.rate <= 1, "corruption.rate: must be in [0, 1]");
  check(c.ewc.lambda >= 0, "ewc.lambda: must be >= 0");
  check(!c.ewc.enabled || c.ewc.fisher_samples >= 1, "ewc.fisher_samples: must be at least 1");
  if (c.kind == ExperimentKind::kContinual) {
    check(c.continual.epochs_per_task >= 1, "continual.epochs_per_task: must be at least 1");
    if (c.continual.tasks == TaskKind::kPermuted) {
      check(c.continual.num_tasks >= 1, "continual.num_tasks: must be at least 1");
    } else {
      check(!c.continual.class_sets.empty(), "continual.class_sets: must not be empty");
      check(c.model.heads >= c.continual.class_sets.size(), "model.heads: split tasks need one head per class set");
      std::set<int> seen;
      for (const auto& s : c.continual.class_sets) {
        check(!s.empty(), "continual.class_sets: empty class set");
        check(c.model.layer_widths.empty() || s.size() <= c.model.layer_widths.back(),
              "model.layers: output width smaller than a class set");
        for (int k : s) {
          check(k >= 0 && k < 10, "continual.class_sets: class " + std::to_string(k) + " outside [0, 10)");
          check(seen.insert(k).second, "continual.class_sets: class " + std::to_string(k) + " repeated");
        }
      }
    }
  }
  if (c.kind == ExperimentKind::kRobustness) {
    check(c.robustness.trials >= 1, "robustness.trials: must be at least 1");
    for (std::size_t i = 0; i < c.robustness.scales.size(); ++i) {
      check(c.robustness.scales[i] >= 0, "robustness.scales: must be >= 0");
      check(i == 0 || c.robustness.scales[i] > c.robustness.scales[i - 1],
            "robustness.scales: must be strictly increasing");
    }
    check(!c.robustness.scales.empty(), "robustness.scales: must not be empty");
  }
  if (c.kind == ExperimentKind::kNvEstimate) {
    check(c.nv.samples >= 2, "nv.samples: must be at least 2");
    check(c.nv.confidence > 0 && c.nv.confidence < 1, "nv.confidence: must be in (0, 1)");
    check(!c.nv.scales.empty(), "nv.scales: must not be empty");
    for (double b : c.nv.scales) check(b > 0, "nv.scales: must be positive");
    check(c.nv.prior_sigma > 0 || c.optimizer.weight_decay > 0,
          "nv.prior_sigma: required when optimizer.weight_decay is 0");
  }
  if (c.kind == ExperimentKind::kGradCheck) check(c.grad_check.instances >= 1, "grad_check.instances: must be at least 1");
  check(!c.resume || !c.checkpoint.empty(), "resume: needs a checkpoint path");
}

/// Parses and validates a config document. Throws ConfigError listing every
/// invalid field.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::ConfigReader r;
  r.known_keys(j, "", {"kind", "seed", "trials", "output", "format", "precision", "data", "model", "optimizer",
                       "noise", "corruption", "ewc", "continual", "robustness", "nv", "grad_check", "checkpoint",
                       "resume", "overwrite"});
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");

  std::string kind;
  r.get(j, "", "kind", kind);
  if (!j.contains("kind"))
    r.errors.push_back("kind: required (train|continual|robustness|nv-estimate|grad-check)");
  else if (auto k = parse_experiment_kind(kind))
    c.kind = *k;
  else
    r.errors.push_back("kind: unknown experiment '" + kind + "'");
  if (!j.contains("seed")) r.errors.push_back("seed: required");
  r.get(j, "", "seed", c.seed);
  r.get(j, "", "trials", c.trials);
  r.get(j, "", "output", c.output);
  std::string format = "csv";
  r.get(j, "", "format", format);
  if (format == "csv" || format == "jsonl")
    c.format = parse_record_format(format);
  else
    r.errors.push_back("format: expected csv|jsonl");
  r.get(j, "", "precision", c.precision);
  r.get(j, "", "checkpoint", c.checkpoint);
  r.get(j, "", "resume", c.resume);
  r.get(j, "", "overwrite", c.overwrite);

  if (j.contains("data")) {
    const auto& d = j["data"];
    r.known_keys(d, "data", {"dir", "train_images", "train_labels", "test_images", "test_labels", "train_subset",
                             "normalize"});
    r.get(d, "data", "dir", c.data.dir);
    r.get(d, "data", "train_images", c.data.train_images);
    r.get(d, "data", "train_labels", c.data.train_labels);
    r.get(d, "data", "test_images", c.data.test_images);
    r.get(d, "data", "test_labels", c.data.test_labels);
    r.get(d, "data", "train_subset", c.data.train_subset);
    r.get(d, "data", "normalize", c.data.normalize);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    r.known_keys(m, "model", {"layers", "heads"});
    r.get(m, "model", "layers", c.model.layer_widths);
    r.get(m, "model", "heads", c.model.heads);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    r.known_keys(o, "optimizer", {"name", "lr", "momentum", "beta1", "beta2", "eps", "weight_decay", "batch_size",
                                  "epochs", "lr_decay_period"});
    std::string name = to_string(c.optimizer.kind);
    r.get(o, "optimizer", "name", name);
    try {
      c.optimizer.kind = parse_optimizer_kind(name);
    } catch (const ConfigError& e) {
      r.errors.push_back(std::string("optimizer.name: ") + e.what());
    }
    r.get(o, "optimizer", "lr", c.optimizer.lr);
    r.get(o, "optimizer", "momentum", c.optimizer.momentum);
    r.get(o, "optimizer", "beta1", c.optimizer.beta1);
    r.get(o, "optimizer", "beta2", c.optimizer.beta2);
    r.get(o, "optimizer", "eps", c.optimizer.eps);
    r.get(o, "optimizer", "weight_decay", c.optimizer.weight_decay);
    r.get(o, "optimizer", "batch_size", c.train.batch_size);
    r.get(o, "optimizer", "epochs", c.train.epochs);
    r.get(o, "optimizer", "lr_decay_period", c.train.lr_decay_period);
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    r.known_keys(n, "noise", {"family", "b"});
    std::string family = "gaussian";
    r.get(n, "noise", "family", family);
    try {
      c.optimizer.noise.family = parse_noise_family(family);
    } catch (const ConfigError& e) {
      r.errors.push_back(std::string("noise.family: ") + e.what());
    }
    r.get(n, "noise", "b", c.optimizer.noise.scale);
  }
  if (j.contains("corruption")) {
    const auto& k = j["corruption"];
    r.known_keys(k, "corruption", {"type", "rate"});
    std::string type = "none";
    r.get(k, "corruption", "type", type);
    if (type == "none")
      c.corruption.type = CorruptionType::kNone;
    else if (type == "symmetric")
      c.corruption.type = CorruptionType::kSymmetric;
    else if (type == "asymmetric")
      c.corruption.type = CorruptionType::kAsymmetric;
    else
      r.errors.push_back("corruption.type: expected none|symmetric|asymmetric");
    r.get(k, "corruption", "rate", c.corruption.rate);
  }
  if (j.contains("ewc")) {
    const auto& e = j["ewc"];
    r.known_keys(e, "ewc", {"enabled", "lambda", "fisher_samples"});
    r.get(e, "ewc", "enabled", c.ewc.enabled);
    r.get(e, "ewc", "lambda", c.ewc.lambda);
    r.get(e, "ewc", "fisher_samples", c.ewc.fisher_samples);
  }
  if (j.contains("continual")) {
    const auto& t = j["continual"];
    r.known_keys(t, "continual", {"tasks", "num_tasks", "epochs_per_task", "class_sets"});
    std::string tasks = "permuted";
    r.get(t, "continual", "tasks", tasks);
    if (tasks == "permuted")
      c.continual.tasks = TaskKind::kPermuted;
    else if (tasks == "split")
      c.continual.tasks = TaskKind::kSplit;
    else
      r.errors.push_back("continual.tasks: expected permuted|split");
    r.get(t, "continual", "num_tasks", c.continual.num_tasks);
    r.get(t, "continual", "epochs_per_task", c.continual.epochs_per_task);
    r.get(t, "continual", "class_sets", c.continual.class_sets);
  }
  if (j.contains("robustness")) {
    const auto& s = j["robustness"];
    r.known_keys(s, "robustness", {"scales", "trials"});
    r.get(s, "robustness", "scales", c.robustness.scales);
    r.get(s, "robustness", "trials", c.robustness.trials);
  }
  if (j.contains("nv")) {
    const auto& n = j["nv"];
    r.known_keys(n, "nv", {"scales", "samples", "confidence", "prior_sigma", "max_examples"});
    r.get(n, "nv", "scales", c.nv.scales);
    r.get(n, "nv", "samples", c.nv.samples);
    r.get(n, "nv", "confidence", c.nv.confidence);
    r.get(n, "nv", "prior_sigma", c.nv.prior_sigma);
    r.get(n, "nv", "max_examples", c.nv.max_examples);
  }
  if (j.contains("grad_check")) {
    const auto& g = j["grad_check"];
    r.known_keys(g, "grad_check", {"instances"});
    r.get(g, "grad_check", "instances", c.grad_check.instances);
  }

  validate_config(c, r.errors);
  if (!r.errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

/// FNV-1a (64-bit) of the canonical JSON of every field that affects results.
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = config_to_json(c);
  for (const char* k : {"seed", "trials", "output", "format", "resume", "overwrite"}) j.erase(k);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string make_run_id(const ExperimentConfig& c, std::uint64_t seed) {
  return config_hash(c) + "-s" + std::to_string(seed);
}

// ---------------------------------------------------------------------------
// Data

template <typename T>
struct MnistSplits {
  Dataset<T> train;
  Dataset<T> test;
};

inline std::filesystem::path resolve_data_dir(const DataSpec& spec) {
  if (!spec.dir.empty()) return spec.dir;
  if (const char* env = std::getenv("NV_DATA_DIR"); env && *env) return env;
  throw ConfigError("data.dir: not set and NV_DATA_DIR is empty");
}

template <typename T>
MnistSplits<T> load_mnist(const DataSpec& spec) {
  const auto dir = resolve_data_dir(spec);
  MnistSplits<T> s;
  s.train = load_idx<T>((dir / spec.train_images).string(), (dir / spec.train_labels).string());
  s.test = load_idx<T>((dir / spec.test_images).string(), (dir / spec.test_labels).string());
  if (spec.train_subset > 0) s.train = take_first(s.train, spec.train_subset);
  if (spec.normalize) std::tie(s.train, s.test) = normalize(s.train, s.test);
  return s;
}

// ---------------------------------------------------------------------------
// Runs

/// Receives (index, metric, value) as a run produces them.
using MetricSink = std::function<void(std::int64_t, const std::string&, double)>;

/// Random streams of one classifier run, keyed by the run seed.
enum : std::uint64_t { kStreamCorruption = 5, kStreamEvaluation = 6 };

template <typename T>
struct ClassifierRun {
  ParameterSet<T> params;            // de-noised final weights
  std::vector<int> train_labels;     // labels trained on (corrupted if requested)
  std::vector<bool> flipped;         // corruption mask, all false without corruption
  std::map<std::string, double> final_metrics;
};

/// Metrics of `params` on the training split as trained (possibly corrupted
/// labels) and on the test split.
template <typename T>
std::map<std::string, double> classifier_metrics(const FcnConfig& model, const ParameterSet<T>& params,
                                                 const MnistSplits<T>& data, const std::vector<int>& train_labels,
                                                 const std::vector<bool>& flipped) {
  std::map<std::string, double> m;
  const Tensor<T> logits = predict(model, params, data.train.images);
  m["train_acc"] = accuracy(logits, train_labels);
  m["test_acc"] = evaluate_accuracy(model, params, data.test);
  m["gen_gap"] = generalization_gap(m["train_acc"], m["test_acc"]);
  if (std::find(flipped.begin(), flipped.end(), true) != flipped.end()) {
    m["clean_subset_acc"] = masked_accuracy(logits, train_labels, flipped, false);
    m["noisy_subset_acc"] = masked_accuracy(logits, train_labels, flipped, true);
    m["noisy_subset_true_acc"] = masked_accuracy(logits, data.train.labels, flipped, true);
  }
  return m;
}

namespace detail {

template <typename T>
void save_training_state(const std::string& path, const ParameterSet<T>& params, const Optimizer<T>& opt,
                         const Rng& shuffle, std::size_t epochs_done) {
  auto [tensors, meta] = opt.export_state();
  for (const auto& [name, value] : params) tensors.add("param/" + name, value);
  meta += "epochs_done=" + std::to_string(epochs_done) + "\nshuffle=" + shuffle.serialize() + "\n";
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, tensors, meta);
  std::filesystem::rename(tmp, path);
}

inline std::string meta_value(const std::string& meta, const std::string& key) {
  std::istringstream lines(meta);
  std::string line;
  while (std::getline(lines, line))
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  throw ParseError("training state lacks '" + key + "'", 0);
}

}  // namespace detail

/// Trains an FCN classifier with the configured optimizer, emitting per-epoch
/// metrics (epochs are 1-based). Evaluation always uses de-noised weights.
/// With `resume`, continues from "<checkpoint>.state" if present and emits
/// only the epochs not yet completed.
template <typename T>
ClassifierRun<T> train_classifier(const ExperimentConfig& cfg, std::uint64_t seed, const MnistSplits<T>& data,
                                  const MetricSink& sink) {
  ClassifierRun<T> run;
  Dataset<T> train = data.train;
  run.flipped.assign(train.size(), false);
  if (cfg.corruption.type != CorruptionType::kNone) {
    Rng crng = Rng::stream(seed, kStreamCorruption);
    const auto c = cfg.corruption.type == CorruptionType::kSymmetric
                       ? corrupt_symmetric(train.labels, cfg.corruption.rate, train.num_classes, crng)
                       : corrupt_asymmetric(train.labels, cfg.corruption.rate, train.num_classes, crng);
    train.labels = c.labels;
    run.flipped = c.flipped;
  }
  run.train_labels = train.labels;

  Rng init = Rng::stream(seed, kStreamInit);
  Rng shuffle = Rng::stream(seed, kStreamShuffle);
  run.params = fcn_init<T>(cfg.model, init);
  Optimizer<T> opt(cfg.optimizer, run.params, Rng::stream(seed, kStreamNoise));

  const std::string state_path = cfg.checkpoint.empty() ? std::string() : cfg.checkpoint + ".state";
  std::size_t first_epoch = 0;
  if (cfg.resume && std::filesystem::exists(state_path)) {
    const auto ck = load_checkpoint<T>(state_path);
    ParameterSet<T> opt_tensors;
    for (const auto& [name, value] : ck.tensors) {
      if (name.rfind("param/", 0) == 0) {
        const std::string pname = name.substr(6);
        if (run.params.at(pname).shape() != value.shape())
          throw DimensionError("training state tensor '" + pname + "' has wrong shape");
        run.params.at(pname) = value;
      } else {
        opt_tensors.add(name, value);
      }
    }
    opt.import_state(opt_tensors, ck.metadata);
    shuffle = Rng::deserialize(detail::meta_value(ck.metadata, "shuffle"));
    first_epoch = std::stoull(detail::meta_value(ck.metadata, "epochs_done"));
  }

  for (std::size_t e = first_epoch; e < cfg.train.epochs; ++e) {
    const double lr = step_decay_lr(cfg.optimizer.lr, cfg.train.lr_decay_period, e);
    opt.set_lr(lr);
    const auto stats = train_epoch(cfg.model, run.params, opt, train, cfg.train.batch_size, shuffle);
    const auto idx = static_cast<std::int64_t>(e + 1);
    if (sink) {
      sink(idx, "lr", lr);
      sink(idx, "train_loss", stats.mean_loss);
    }
    const std::size_t period = std::max<std::size_t>(cfg.train.eval_period, 1);
    if ((e + 1) % period == 0 || e + 1 == cfg.train.epochs) {
      run.final_metrics = opt.evaluate(run.params, [&](const ParameterSet<T>& w) {
        return classifier_metrics(cfg.model, w, data, run.train_labels, run.flipped);
      });
      if (sink)
        for (const auto& [k, v] : run.final_metrics) sink(idx, k, v);
    }
    if (!state_path.empty() && e + 1 < cfg.train.epochs)
      detail::save_training_state(state_path, run.params, opt, shuffle, e + 1);
  }
  opt.finalize(run.params);
  if (run.final_metrics.empty())
    run.final_metrics = classifier_metrics(cfg.model, run.params, data, run.train_labels, run.flipped);
  if (!state_path.empty()) std::filesystem::remove(state_path);
  if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, run.params, config_hash(cfg));
  return run;
}

/// Final weights for analysis kinds: loaded from `checkpoint` when it exists,
/// otherwise trained (and saved when a path is given).
template <typename T>
ParameterSet<T> obtain_weights(const ExperimentConfig& cfg, std::uint64_t seed, const MnistSplits<T>& data,
                               const MetricSink& sink) {
  if (!cfg.checkpoint.empty() && std::filesystem::exists(cfg.checkpoint)) {
    auto ck = load_checkpoint<T>(cfg.checkpoint);
    Rng dummy(0);
    const auto layout = fcn_init<T>(cfg.model, dummy);
    if (!layout.same_layout(ck.tensors))
      throw DimensionError("checkpoint '" + cfg.checkpoint + "' does not match the model layout");
    return std::move(ck.tensors);
  }
  ExperimentConfig train_cfg = cfg;
  train_cfg.resume = false;
  return train_classifier(train_cfg, seed, data, sink).params;
}

/// Gradient check on `instances` random small FCNs: returns the largest
/// elementwise relative error between backward() and central differences.
inline double run_grad_check(std::size_t instances, std::uint64_t seed, const MetricSink& sink = {}) {
  Rng rng = Rng::stream(seed, kStreamEvaluation);
  double worst = 0;
  for (std::size_t i = 0; i < instances; ++i) {
    FcnConfig model;
    model.layer_widths.push_back(2 + rng.below(5));
    const std::size_t hidden = 1 + rng.below(2);
    for (std::size_t h = 0; h < hidden; ++h) model.layer_widths.push_back(2 + rng.below(6));
    model.layer_widths.push_back(2 + rng.below(4));
    auto params = fcn_init<double>(model, rng);
    for (auto& e : params)
      for (auto& v : e.value.data()) v += 0.1 * rng.normal();
    const std::size_t n = 1 + rng.below(6);
    Tensor<double> x(Shape{n, model.input_width()});
    for (auto& v : x.data()) v = rng.normal();
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.below(model.output_width()));
    auto fwd = forward_loss(model, params, x, y);
    const auto g = fwd.tape.backward(fwd.loss, params);
    const auto fd = finite_diff_grad<double>(
        [&](const ParameterSet<double>& p) { return static_cast<double>(forward_loss(model, p, x, y).loss_value()); },
        params, 1e-6);
    const double err = max_relative_error(g, fd);
    if (sink) sink(static_cast<std::int64_t>(i), "rel_error", err);
    worst = std::max(worst, err);
  }
  return worst;
}

namespace detail {

template <typename T>
bool run_trial(const ExperimentConfig& cfg, std::uint64_t seed, const MetricSink& sink, std::ostream& log) {
  switch (cfg.kind) {
    case ExperimentKind::kGradCheck: {
      const double worst = run_grad_check(cfg.grad_check.instances, seed, sink);
      const bool ok = worst < 1e-4;
      sink(0, "max_rel_error", worst);
      sink(0, "passed", ok ? 1.0 : 0.0);
      log << "grad-check: max relative error " << worst << (ok ? " (pass)" : " (FAIL)") << "\n";
      return ok;
    }
    case ExperimentKind::kTrain: {
      const auto data = load_mnist<T>(cfg.data);
      train_classifier(cfg, seed, data, sink);
      return true;
    }
    case ExperimentKind::kContinual: {
      const auto data = load_mnist<T>(cfg.data);
      ContinualConfig cc;
      cc.model = cfg.model;
      cc.optimizer = cfg.optimizer;
      cc.kind = cfg.continual.tasks;
      cc.num_tasks = cfg.continual.num_tasks;
      cc.class_sets = cfg.continual.class_sets;
      cc.batch_size = cfg.train.batch_size;
      cc.epochs_per_task = cfg.continual.epochs_per_task;
      cc.ewc = cfg.ewc;
      cc.seed = seed;
      run_task_sequence<T>(cc, data.train, data.test,
                           [&](std::size_t t, const ContinualReport& r, const ParameterSet<T>&) {
                             const auto idx = static_cast<std::int64_t>(t);
                             for (std::size_t j = 0; j < r.accuracy[t].size(); ++j)
                               sink(idx, "task" + std::to_string(j) + "_acc", r.accuracy[t][j]);
                             sink(idx, "base_acc", r.base_accuracy[t]);
                             sink(idx, "mean_acc", r.mean_accuracy[t]);
                           });
      return true;
    }
    case ExperimentKind::kRobustness: {
      const auto data = load_mnist<T>(cfg.data);
      const auto params = obtain_weights(cfg, seed, data, sink);
      Rng rng = Rng::stream(seed, kStreamEvaluation);
      const auto curve = robustness_sweep(cfg.model, params, data.test, cfg.robustness.scales,
                                          cfg.robustness.trials, rng);
      for (std::size_t i = 0; i < curve.points.size(); ++i) {
        const auto idx = static_cast<std::int64_t>(i);
        sink(idx, "scale", curve.points[i].scale);
        sink(idx, "mean_acc", curve.points[i].mean_accuracy);
        sink(idx, "std_acc", curve.points[i].std_accuracy);
      }
      return true;
    }
    case ExperimentKind::kNvEstimate: {
      const auto data = load_mnist<T>(cfg.data);
      const auto params = obtain_weights(cfg, seed, data, sink);
      const Dataset<T> eval =
          cfg.nv.max_examples > 0 ? take_first(data.train, cfg.nv.max_examples) : data.train;
      const auto loss = dataset_loss(cfg.model, eval);
      const double sigma =
          cfg.nv.prior_sigma > 0 ? cfg.nv.prior_sigma : prior_sigma_from_weight_decay(cfg.optimizer.weight_decay);
      const double risk = 1.0 - evaluate_accuracy(cfg.model, params, data.train);
      const double m = static_cast<double>(data.train.size());
      Rng rng = Rng::stream(seed, kStreamEvaluation);
      for (std::size_t i = 0; i < cfg.nv.scales.size(); ++i) {
        const double b = cfg.nv.scales[i];
        const auto d = estimate_nv_delta(loss, params, b, cfg.nv.samples, rng);
        const double kl = kl_gaussian_posterior_prior(params, b, sigma);
        const auto idx = static_cast<std::int64_t>(i);
        sink(idx, "b", b);
        sink(idx, "clean_loss", d.estimate.clean_loss);
        sink(idx, "perturbed_loss", d.estimate.perturbed_loss);
        sink(idx, "delta", d.delta);
        sink(idx, "half_width", d.half_width);
        sink(idx, "rejected", static_cast<double>(d.estimate.rejected));
        sink(idx, "kl", kl);
        sink(idx, "pac_bayes_bound", pac_bayes_bound(risk, kl, m, cfg.nv.confidence, d.delta));
      }
      return true;
    }
  }
  return false;
}

// Run ids already present in an existing records file, with completion.
inline std::map<std::string, bool> existing_runs(const std::string& path, RecordFormat format) {
  std::map<std::string, bool> runs;
  if (!std::filesystem::exists(path) || std::filesystem::file_size(path) == 0) return runs;
  for (const auto& r : read_records(path, format)) {
    auto& done = runs[r.run_id];
    done = done || r.metric == "run_complete";
  }
  return runs;
}

}  // namespace detail

/// Runs every trial of `cfg`, appending records to cfg.output as they are
/// produced. Returns false if a trial reported failure (grad-check above
/// tolerance). Throws ConfigError when a completed run would be repeated
/// without `overwrite`; other exceptions propagate after the records written
/// so far have been flushed.
inline bool run_experiment(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  const std::string hash = config_hash(cfg);
  bool append = false;
  if (!cfg.overwrite) {
    const auto runs = detail::existing_runs(cfg.output, cfg.format);
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      const std::string id = make_run_id(cfg, cfg.seed + t);
      const auto it = runs.find(id);
      if (it == runs.end()) continue;
      if (it->second) throw ConfigError("run " + id + " already completed in '" + cfg.output + "' (use --overwrite)");
      if (!cfg.resume)
        throw ConfigError("run " + id + " has partial records in '" + cfg.output + "' (use --overwrite or resume)");
    }
    append = !runs.empty();
  }
  {
    std::ofstream side(cfg.output + ".config.json", std::ios::trunc);
    nlohmann::json j = config_to_json(cfg);
    j["config_hash"] = hash;
    side << j.dump(2) << "\n";
  }
  RecordWriter writer(cfg.output, cfg.format, append);
  bool ok = true;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const std::uint64_t seed = cfg.seed + t;
    const std::string id = make_run_id(cfg, seed);
    const std::string kind = to_string(cfg.kind);
    MetricSink sink = [&](std::int64_t index, const std::string& metric, double value) {
      writer.append(MetricRecord{id, seed, kind, index, metric, value, utc_timestamp()});
    };
    log << "run " << id << " (" << kind << ", " << cfg.precision << ")\n";
    const bool trial_ok = cfg.precision == "f64" ? detail::run_trial<double>(cfg, seed, sink, log)
                                                 : detail::run_trial<float>(cfg, seed, sink, log);
    sink(0, "run_complete", trial_ok ? 1.0 : 0.0);
    ok = ok && trial_ok;
  }
  return ok;
}

}  // namespace nvrm
