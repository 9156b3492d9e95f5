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

#pragma once

// Command implementations behind the pvcam executable. Kept out of the
// umbrella header because the manifest digests need OpenSSL.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "pvcam/pvcam.hpp"

namespace pvcam::cli {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Flat configuration
// ---------------------------------------------------------------------------

/// Every recognized key with its default. "auto" and "cv" mark values chosen
/// by the data (BIC, cross-validation).
inline const std::vector<std::pair<std::string, std::string>>& default_config() {
  static const std::vector<std::pair<std::string, std::string>> d{
      {"seed", "20240601"},
      {"n", "20"},
      {"T", "200"},
      {"replication", "0"},
      {"replications", "50"},
      {"T_values", "100,200,400"},
      {"rho", "0.6"},
      {"ar_sigma", "0.5"},
      {"noise_sigma", "0.1"},
      {"eta_sigma", "0.1"},
      {"burn_in", "200"},
      {"normalize_truth", "true"},
      {"use_true_partition", "true"},
      {"p", "1"},
      {"degree", "3"},
      {"K0", "auto"},
      {"K", "auto"},
      {"mode", "correct"},
      {"threshold", "cv"},
      {"cv_folds", "5"},
      {"refine", "true"},
      {"variance_loop", "true"},
      {"holdout_days", "14"},
      {"ridge", "1e-8"},
      {"tolerance", "1e-8"},
      {"max_iterations", "200"},
  };
  return d;
}

class Config {
 public:
  Config() {
    for (const auto& [k, v] : default_config()) values_[k] = v;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }
  void merge(const io::KeyValues& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }
  void merge_file(const std::string& path) { merge(io::read_key_values(path)); }

  const std::string& str(const std::string& key) const { return values_.at(key); }
  bool is(const std::string& key, const std::string& value) const { return str(key) == value; }

  int integer(const std::string& key) const { return io::parse_int(str(key), "config key '" + key + "'"); }
  double real(const std::string& key) const { return io::parse_double(str(key), "config key '" + key + "'"); }
  std::uint64_t unsigned64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
      throw ConfigError("config key '" + key + "' must be a nonnegative integer, got '" + s + "'");
    return v;
  }
  bool boolean(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' must be true or false, got '" + s + "'");
  }
  std::optional<int> optional_int(const std::string& key) const {
    if (is(key, "auto")) return std::nullopt;
    return integer(key);
  }
  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    for (const auto& f : io::split_csv_line(str(key))) out.push_back(io::parse_int(f, "config key '" + key + "'"));
    if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
    return out;
  }

  /// `key = value` lines in the order of default_config().
  std::string render() const {
    std::string out;
    for (const auto& [k, v] : default_config()) out += k + " = " + values_.at(k) + '\n';
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline SimulationConfig simulation_config(const Config& c) {
  SimulationConfig s;
  s.n = c.integer("n");
  s.T = c.integer("T");
  s.replications = c.integer("replications");
  s.seed = c.unsigned64("seed");
  s.rho = c.real("rho");
  s.ar_sigma = c.real("ar_sigma");
  s.noise_sigma = c.real("noise_sigma");
  s.eta_sigma = c.real("eta_sigma");
  s.burn_in = c.integer("burn_in");
  s.normalize_truth = c.boolean("normalize_truth");
  s.validate();
  return s;
}

inline SolverOptions solver_options(const Config& c) {
  SolverOptions s;
  s.ridge = c.real("ridge");
  s.tolerance = c.real("tolerance");
  s.max_iterations = c.integer("max_iterations");
  if (!(s.ridge >= 0)) throw ConfigError("ridge must be nonnegative");
  if (!(s.tolerance > 0)) throw ConfigError("tolerance must be positive");
  if (s.max_iterations < 1) throw ConfigError("max_iterations must be positive");
  return s;
}

inline PipelineOptions pipeline_options(const Config& c) {
  PipelineOptions o;
  o.p = c.integer("p");
  o.degree = c.integer("degree");
  o.K0 = c.optional_int("K0");
  o.K = c.optional_int("K");
  o.mode = parse_fit_mode(c.str("mode"));
  if (!c.is("threshold", "cv")) o.threshold = c.real("threshold");
  o.cv_folds = c.integer("cv_folds");
  o.identify.refine = c.boolean("refine");
  o.variance_loop = c.boolean("variance_loop");
  o.solver = solver_options(c);
  if (o.p < 0) throw ConfigError("p must be nonnegative");
  return o;
}

// ---------------------------------------------------------------------------
// Output directory and manifest
// ---------------------------------------------------------------------------

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw NumericalError("SHA-256 context initialization failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int k = 0; k < len; ++k) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
  return hex.str();
}

inline constexpr const char* kManifestName = "manifest.txt";

/// Collects the files of one command run and writes the manifest last.
class OutputDir {
 public:
  OutputDir(std::string command, const std::string& path) : command_(std::move(command)), root_(path) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec || !std::filesystem::is_directory(root_))
      throw ConfigError("cannot create output directory '" + path + "'");
  }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  /// Opens an output file and records it for the manifest.
  std::ofstream open(const std::string& name) {
    auto out = io::open_output(path(name));
    outputs_.push_back(name);
    return out;
  }

  void add_input(const std::string& file) { inputs_.push_back(file); }

  void write_manifest(const Config& config) const {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    auto out = io::open_output(path(kManifestName));
    out << "command: " << command_ << '\n'
        << "version: " << kVersion << '\n'
        << "seed: " << config.str("seed") << '\n'
        << "[config]\n"
        << config.render() << "[inputs]\n";
    for (const auto& f : inputs_) out << sha256_file(f) << "  " << f << '\n';
    out << "[outputs]\n";
    for (const auto& f : outputs_) out << sha256_file(path(f)) << "  " << f << '\n';
    out << "[timings]\n"
        << "wall_seconds = " << io::format_fixed(seconds, 3) << '\n';
  }

 private:
  std::string command_;
  std::filesystem::path root_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Panel CSV, true partitions and manifest for one replication stream.
inline void cmd_simulate(const Config& config, const std::string& out_dir) {
  const SimulationConfig cfg = simulation_config(config);
  OutputDir out("simulate", out_dir);
  const SimulatedPanel sim = generate(cfg, config.integer("replication"));
  {
    auto f = out.open("panel.csv");
    io::write_panel_csv(f, sim.data);
  }
  {
    auto f = out.open("partitions_true.csv");
    io::write_partitions(f, sim.coef_partition, sim.additive_partition);
  }
  out.write_manifest(config);
}

namespace detail {
inline void write_variances(std::ostream& out, const VarianceLoopResult& r) {
  out << "sigma2,sigma_eta2,converged,iterations\n"
      << io::format_double(r.variances.sigma2) << ',' << io::format_double(r.variances.sigma_eta2) << ','
      << (r.converged ? 1 : 0) << ',' << r.iterations << '\n';
}

inline void write_tuning(OutputDir& out, const PipelineResult& r) {
  if (r.k0_trace || r.k_trace) {
    auto f = out.open("bic.csv");
    bool header = true;
    if (r.k0_trace) {
      io::write_bic_trace(f, "K0", *r.k0_trace, header);
      header = false;
    }
    if (r.k_trace) io::write_bic_trace(f, "K", *r.k_trace, header);
  }
  if (r.cv) {
    auto f = out.open("cv.csv");
    io::write_cv_trace(f, *r.cv);
  }
}
}  // namespace detail

/// Full pipeline on a panel CSV: model, partitions, function grids,
/// variances, tuning traces, manifest.
inline void cmd_fit(const Config& config, const std::string& data_path, const std::string& out_dir) {
  const PipelineOptions opts = pipeline_options(config);
  const PanelDataset raw = io::read_panel_csv(data_path);
  OutputDir out("fit", out_dir);
  out.add_input(data_path);
  const PipelineResult r = fit_pipeline(raw, opts);
  {
    auto f = out.open("model.json");
    f << io::model_to_json(r.model).dump(2) << '\n';
  }
  {
    auto f = out.open("partitions.csv");
    io::write_partitions(f, r.coef_partition, r.additive_partition);
  }
  {
    auto f = out.open("functions.csv");
    io::write_function_grids(f, r.model);
  }
  {
    auto f = out.open("variances.csv");
    detail::write_variances(f, r.final_fit);
  }
  detail::write_tuning(out, r);
  {
    auto f = out.open("config.txt");
    f << config.render();
  }
  for (const auto& w : r.model.status.warnings) warn(w);
  out.write_manifest(config);
}

/// Initial fit and structure identification only.
inline void cmd_identify(const Config& config, const std::string& data_path, const std::string& out_dir) {
  const PipelineOptions opts = pipeline_options(config);
  const PanelDataset raw = io::read_panel_csv(data_path);
  OutputDir out("identify", out_dir);
  out.add_input(data_path);
  const ScaledPanel scaled = scale_to_unit(raw);
  ModelSpec spec;
  spec.p = opts.p;
  spec.q = scaled.data.num_covariates();
  spec.degree = opts.degree;
  PipelineResult r;
  if (opts.K0) {
    spec.K0 = *opts.K0;
  } else {
    r.k0_trace = bic_select_knots(scaled.data, spec, opts.solver);
    spec.K0 = r.k0_trace->chosen;
  }
  spec.K = spec.K0;
  spec.validate();
  const auto prep = prepare_panel(scaled.data, spec.p, BSplineBasis(spec.K0, spec.degree));
  const auto initial = initial_fit(prep, opts.solver);
  const auto fam = sample_initial_families(initial, opts.identify.data_domain ? &prep : nullptr);
  IdentifiedStructure s;
  if (opts.threshold) {
    s = identify_structure(fam, *opts.threshold, opts.identify);
  } else {
    r.cv = select_threshold_cv(prep, fam, opts.threshold_grid, opts.cv_folds, opts.identify, opts.solver);
    s = r.cv->structure;
  }
  {
    auto f = out.open("partitions.csv");
    io::write_partitions(f, s.coef, s.additive);
  }
  {
    auto f = out.open("partitions_greedy.csv");
    io::write_partitions(f, s.coef_greedy, s.additive_greedy);
  }
  detail::write_tuning(out, r);
  out.write_manifest(config);
}

/// NMI of estimated against reference partitions, one row per family.
inline void cmd_evaluate(const Config& config, const std::string& estimate_path, const std::string& truth_path,
                         const std::string& out_dir) {
  const auto est = io::read_partitions(estimate_path);
  const auto ref = io::read_partitions(truth_path);
  OutputDir out("evaluate", out_dir);
  out.add_input(estimate_path);
  out.add_input(truth_path);
  auto f = out.open("nmi.csv");
  f << "family,blocks_estimate,blocks_reference,nmi\n"
    << "coef," << est.first.num_blocks() << ',' << ref.first.num_blocks() << ','
    << io::format_fixed(nmi(est.first, ref.first), 4) << '\n'
    << "additive," << est.second.num_blocks() << ',' << ref.second.num_blocks() << ','
    << io::format_fixed(nmi(est.second, ref.second), 4) << '\n';
  f.close();
  out.write_manifest(config);
}

/// Monte-Carlo study over T_values; NMI and MISE tables plus per-replication
/// records.
inline void cmd_reproduce(const Config& config, const std::string& out_dir) {
  SimulationConfig base = simulation_config(config);
  StudyOptions opts;
  opts.use_true_partition = config.boolean("use_true_partition");
  if (!config.is("threshold", "cv")) opts.threshold = config.real("threshold");
  opts.cv_folds = config.integer("cv_folds");
  opts.identify.refine = config.boolean("refine");
  opts.K0 = config.optional_int("K0");
  opts.K = config.optional_int("K");
  opts.solver = solver_options(config);
  OutputDir out("reproduce", out_dir);
  std::vector<StudyResult> studies;
  for (int T : config.int_list("T_values")) {
    SimulationConfig cfg = base;
    cfg.T = T;
    cfg.validate();
    studies.push_back(run_study(cfg, opts));
  }
  {
    auto f = out.open("table_nmi.csv");
    io::write_nmi_table(f, studies);
  }
  {
    auto f = out.open("table_mise.csv");
    io::write_mise_table(f, studies, opts.modes);
  }
  {
    auto f = out.open("replications.csv");
    for (std::size_t k = 0; k < studies.size(); ++k) {
      std::ostringstream s;
      io::write_replications(s, studies[k], opts.modes);
      std::string text = s.str();
      if (k > 0) text.erase(0, text.find('\n') + 1);  // one header
      f << text;
    }
  }
  int failures = 0;
  for (const auto& s : studies) failures += s.failures;
  if (failures > 0) warn(std::to_string(failures) + " replication(s) failed; see replications.csv");
  out.write_manifest(config);
}

/// In-sample fitted values from a fitted model directory; with a positive
/// horizon also the rolling out-of-sample prediction error, refitting with
/// the configuration stored next to the model.
inline void cmd_predict(const Config& config, const std::string& model_dir, const std::string& data_path,
                        int holdout_days, const std::string& out_dir) {
  if (holdout_days < 0) throw ConfigError("holdout days must be nonnegative");
  const auto model_path = (std::filesystem::path(model_dir) / "model.json").string();
  const auto config_path = (std::filesystem::path(model_dir) / "config.txt").string();
  if (!std::filesystem::exists(model_path)) throw DataError("model directory lacks model.json: '" + model_dir + "'");
  std::ifstream mf(model_path);
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse '" + model_path + "': " + e.what());
  }
  const FittedModel model = io::model_from_json(j);
  const PanelDataset raw = io::read_panel_csv(data_path);
  OutputDir out("predict", out_dir);
  out.add_input(model_path);
  out.add_input(data_path);
  {
    auto f = out.open("fitted.csv");
    f << "cluster_id,t,y,fitted,residual\n";
    for (const auto& c : predict(model, raw))
      for (std::size_t k = 0; k < c.fitted.size(); ++k)
        f << c.id << ',' << c.time[k] + 1 << ',' << io::format_double(c.observed[k]) << ','
          << io::format_double(c.fitted[k]) << ',' << io::format_double(c.observed[k] - c.fitted[k]) << '\n';
  }
  if (holdout_days > 0) {
    if (!std::filesystem::exists(config_path)) throw DataError("model directory lacks config.txt: '" + model_dir + "'");
    out.add_input(config_path);
    Config fit_config;
    fit_config.merge_file(config_path);
    const auto pe = rolling_prediction_error(raw, pipeline_options(fit_config), holdout_days);
    auto f = out.open("pe.csv");
    f << "cluster_id,pe\n";
    for (std::size_t i = 0; i < pe.cluster_ids.size(); ++i)
      f << pe.cluster_ids[i] << ',' << io::format_fixed(pe.per_cluster[i], 4) << '\n';
    f << "all," << io::format_fixed(pe.pe, 4) << '\n';
  }
  out.write_manifest(config);
}

}  // namespace pvcam::cli
