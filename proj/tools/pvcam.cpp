// Copyright 2026 The pvcam Authors. All Rights Reserved.
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

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pvcam/cli.hpp"

namespace {

// Flags shared by every subcommand; each overrides the config file.
struct CommonFlags {
  std::string config_path;
  std::string out = "pvcam-out";
  std::optional<std::string> seed, mode, threshold, replications;
  std::vector<std::string> sets;
  bool print_config = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_path, "key = value config file");
  app->add_option("--out", f.out, "output directory")->capture_default_str();
  app->add_option("--seed", f.seed, "base random seed");
  app->add_option("--mode", f.mode, "fit mode: overfit, underfit or correct");
  app->add_option("--threshold", f.threshold, "structure threshold; 'cv' selects it by cross-validation");
  app->add_option("--replications", f.replications, "Monte-Carlo replications per T");
  app->add_option("--set", f.sets, "extra key=value override, repeatable");
  app->add_flag("--print-config", f.print_config, "print the resolved configuration and exit");
}

pvcam::cli::Config resolve(const CommonFlags& f) {
  pvcam::cli::Config c;
  if (!f.config_path.empty()) c.merge_file(f.config_path);
  if (f.seed) c.set("seed", *f.seed);
  if (f.mode) c.set("mode", *f.mode);
  if (f.threshold) c.set("threshold", *f.threshold);
  if (f.replications) c.set("replications", *f.replications);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw pvcam::ConfigError("--set expects key=value, got '" + s + "'");
    c.set(std::string(pvcam::io::trim(s.substr(0, eq))), std::string(pvcam::io::trim(s.substr(eq + 1))));
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustered varying-coefficient additive models with latent structure"};
  app.set_version_flag("--version", pvcam::cli::kVersion);
  app.require_subcommand(0, 1);

  CommonFlags flags;
  app.add_flag("--print-config", flags.print_config, "print the default configuration and exit");
  std::string data, model_dir, estimate, truth;
  std::optional<std::string> holdout;

  auto* simulate = app.add_subcommand("simulate", "simulate a panel with known latent structure");
  auto* fit = app.add_subcommand("fit", "fit the model to a panel CSV");
  auto* identify = app.add_subcommand("identify", "identify the latent partitions only");
  auto* evaluate = app.add_subcommand("evaluate", "NMI of estimated against reference partitions");
  auto* reproduce = app.add_subcommand("reproduce", "Monte-Carlo study tables for NMI and MISE");
  auto* predict = app.add_subcommand("predict", "fitted values and rolling prediction error");
  for (auto* sub : {simulate, fit, identify, evaluate, reproduce, predict}) add_common(sub, flags);
  // Required inputs are checked after parsing so --print-config works alone.
  for (auto* sub : {fit, identify, predict}) sub->add_option("--data", data, "panel CSV (required)");
  evaluate->add_option("--estimate", estimate, "estimated partitions CSV (required)");
  evaluate->add_option("--truth", truth, "reference partitions CSV (required)");
  predict->add_option("--model", model_dir, "directory written by 'fit' (required)");
  predict->add_option("--holdout-days", holdout, "rolling horizon in days; 0 gives in-sample values only");

  // Parse errors and --help map to the usage exit code; help exits 0.
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(pvcam::ErrorCategory::usage);
  }

  try {
    pvcam::cli::Config config = resolve(flags);
    if (holdout) config.set("holdout_days", *holdout);
    if (flags.print_config) {
      std::cout << config.render();
      return 0;
    }
    if (app.get_subcommands().empty()) throw pvcam::ConfigError("a subcommand is required; see --help");
    auto need = [](const std::string& value, const char* flag) {
      if (value.empty()) throw pvcam::ConfigError(std::string(flag) + " is required");
    };
    if (fit->parsed() || identify->parsed() || predict->parsed()) need(data, "--data");
    if (evaluate->parsed()) {
      need(estimate, "--estimate");
      need(truth, "--truth");
    }
    if (predict->parsed()) need(model_dir, "--model");
    if (simulate->parsed()) pvcam::cli::cmd_simulate(config, flags.out);
    if (fit->parsed()) pvcam::cli::cmd_fit(config, data, flags.out);
    if (identify->parsed()) pvcam::cli::cmd_identify(config, data, flags.out);
    if (evaluate->parsed()) pvcam::cli::cmd_evaluate(config, estimate, truth, flags.out);
    if (reproduce->parsed()) pvcam::cli::cmd_reproduce(config, flags.out);
    if (predict->parsed())
      pvcam::cli::cmd_predict(config, model_dir, data, config.integer("holdout_days"), flags.out);
  } catch (const pvcam::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(pvcam::ErrorCategory::data);
  }
  return 0;
}
