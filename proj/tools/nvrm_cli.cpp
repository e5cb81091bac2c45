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

// nvrm: runs one experiment described by a JSON config.
//
//   nvrm --config exp.json [--seed N] [--trials N] [--out PATH]
//        [--format csv|jsonl] [--precision f32|f64] [--overwrite] [--resume]
//
// Exit status: 0 success, 2 config error, 3 runtime failure.

#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nvrm/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and analyse networks with neural-variable optimizers."};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trials;
  std::optional<std::string> out, format, precision;
  bool overwrite = false, resume = false;
  app.add_option("--config", config_path, "experiment config (JSON)")->required();
  app.add_option("--seed", seed, "base seed; trial i uses seed + i");
  app.add_option("--trials", trials, "number of trials");
  app.add_option("--out", out, "records file");
  app.add_option("--format", format, "records format")->check(CLI::IsMember({"csv", "jsonl"}));
  app.add_option("--precision", precision, "floating-point precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--overwrite", overwrite, "replace an existing records file");
  app.add_flag("--resume", resume, "continue an interrupted train run from its checkpoint");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  nvrm::ExperimentConfig cfg;
  try {
    std::ifstream in(config_path);
    if (!in) throw nvrm::ConfigError("cannot read config '" + config_path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw nvrm::ConfigError("config '" + config_path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw nvrm::ConfigError("config: expected a JSON object");
    if (seed) j["seed"] = *seed;
    if (trials) j["trials"] = *trials;
    if (out) j["output"] = *out;
    if (format) j["format"] = *format;
    if (precision) j["precision"] = *precision;
    if (overwrite) j["overwrite"] = true;
    if (resume) j["resume"] = true;
    cfg = nvrm::parse_experiment_config(j);
  } catch (const nvrm::ConfigError& e) {
    std::cerr << "nvrm: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    const bool ok = nvrm::run_experiment(cfg, std::cout);
    std::cout << "records: " << cfg.output << "\n";
    return ok ? 0 : kExitRuntime;
  } catch (const nvrm::ConfigError& e) {
    std::cerr << "nvrm: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "nvrm: run failed: " << e.what() << "\n";
    return kExitRuntime;
  }
}
