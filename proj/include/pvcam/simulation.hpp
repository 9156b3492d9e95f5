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

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/estimation.hpp"
#include "pvcam/metrics.hpp"
#include "pvcam/pipeline.hpp"
#include "pvcam/structure_id.hpp"
#include "pvcam/tuning.hpp"

namespace pvcam {

struct SimulationConfig {
  int n = 20;
  int T = 200;
  int replications = 50;
  std::uint64_t seed = 20240601;
  double rho = 0.6;
  double ar_sigma = 0.5;
  double noise_sigma = 0.1;
  double eta_sigma = 0.1;
  int burn_in = 200;
  // Rescale each coefficient function to unit mean and center each additive
  // function, so the generating model satisfies the identifiability
  // constraints. With false the functions are used exactly as listed.
  bool normalize_truth = true;

  void validate() const {
    if (n < 2 || n % 2 != 0) throw ConfigError("simulation needs an even cluster count n >= 2");
    if (T < 3) throw ConfigError("simulation series length T must be at least 3");
    if (replications < 1) throw ConfigError("replications must be positive");
    if (!(ar_sigma > 0)) throw ConfigError("ar_sigma must be positive");
    if (!(noise_sigma >= 0) || !(eta_sigma >= 0)) throw ConfigError("noise scales must be nonnegative");
    if (!(std::abs(rho) < 1)) throw ConfigError("AR coefficient must lie in (-1, 1)");
    if (burn_in < 0) throw ConfigError("burn_in must be nonnegative");
  }
};

/// The generating functions: b(u); a_{i,1}, a_{i,2} of u; g_{i,1} of the
/// lagged response and g_{i,2} of the covariate, each in two halves by i.
class TrueFunctions {
 public:
  TrueFunctions() = default;
  TrueFunctions(int n, bool normalized, double x_variance, double lag_center)
      : n_(n), normalized_(normalized) {
    constexpr double pi = std::numbers::pi;
    if (normalized) {
      a_mean_[0] = 1.0 - 1.3 / (2 * pi);
      a_mean_[1] = 1.0;
      a_mean_[2] = 1.1 + 4.0 / (3 * pi);
      // E cos(w x) = exp(-w^2 s^2 / 2) and E sin(w x) = 0 for x ~ N(0, s^2).
      g_center_[1] = 2.0 * std::exp(-std::pow(pi / 2, 2) * x_variance / 2);
      g_center_[2] = -1.2 * std::exp(-std::pow(pi / 3, 2) * x_variance / 2);
      g_center_[0] = lag_center;
      g_scale_ = a_mean_[2];
    }
  }

  int num_clusters() const noexcept { return n_; }
  bool normalized() const noexcept { return normalized_; }
  bool first_half(int i) const noexcept { return i < n_ / 2; }

  static double b(double u) { return 1.5 * std::cos(2 * std::numbers::pi * u); }

  double a(int i, int j, double u) const {
    constexpr double pi = std::numbers::pi;
    if (j == 0)
      return first_half(i) ? (1.3 * u * std::sin(2 * pi * u) + 1) / a_mean_[0]
                           : (1.3 * u * std::cos(2 * pi * u) + 1) / a_mean_[1];
    return (2 * std::sin(1.5 * pi * u) - 1.2 * (u - 0.5) * (1 - u) + 1) / a_mean_[2];
  }

  double g(int i, int j, double v) const {
    constexpr double pi = std::numbers::pi;
    if (j == 0) return -0.8 * (1 - v * v) / (1 + v * v) - g_center_[0];
    if (first_half(i)) return g_scale_ * (2 * std::cos(pi * v / 2) + 1.8 * std::sin(pi * v / 3) - g_center_[1]);
    return g_scale_ * (1.5 * std::sin(pi * v / 4) - 1.2 * std::cos(pi * v / 3) - g_center_[2]);
  }

 private:
  int n_ = 0;
  bool normalized_ = false;
  std::array<double, 3> a_mean_{1.0, 1.0, 1.0};    // a_{.,1} first half, second half; a_{.,2}
  std::array<double, 3> g_center_{0.0, 0.0, 0.0};  // g_{.,1}; g_{.,2} first half, second half
  double g_scale_ = 1.0;
};

struct SimulatedPanel {
  PanelDataset data;
  TrueFunctions truth;
  PairPartition coef_partition;
  PairPartition additive_partition;
};

/// Three blocks per family: a_{.,1} splits by halves and a_{.,2} is shared;
/// g_{.,1} is shared and g_{.,2} splits by halves.
inline std::pair<PairPartition, PairPartition> true_partitions(int n) {
  std::vector<int> coef(static_cast<std::size_t>(2 * n)), additive(static_cast<std::size_t>(2 * n));
  for (int i = 0; i < n; ++i) {
    const bool first = i < n / 2;
    coef[static_cast<std::size_t>(2 * i)] = first ? 0 : 1;
    coef[static_cast<std::size_t>(2 * i + 1)] = 2;
    additive[static_cast<std::size_t>(2 * i)] = 0;
    additive[static_cast<std::size_t>(2 * i + 1)] = first ? 1 : 2;
  }
  return {PairPartition(n, 2, std::move(coef)), PairPartition(n, 2, std::move(additive))};
}

inline std::string cluster_label(int i, int n) {
  const auto digits = std::to_string(n).size();
  auto s = std::to_string(i + 1);
  return "c" + std::string(digits > s.size() ? digits - s.size() : 0, '0') + s;
}

namespace detail {

inline std::mt19937_64 replication_engine(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream & 0xffffffffu), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

// Draws one cluster path of length T (after the pre-sample value).
inline ClusterSeries simulate_cluster(const SimulationConfig& cfg, const TrueFunctions& truth, int i, int T,
                                      std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  ClusterSeries s;
  s.id = cluster_label(i, cfg.n);
  s.u.resize(static_cast<std::size_t>(T));
  s.y.resize(static_cast<std::size_t>(T));
  s.x.resize(T, 1);
  const double eta = cfg.eta_sigma * normal(rng);
  double x = 0.0;
  for (int b = 0; b < cfg.burn_in; ++b) x = cfg.rho * x + cfg.ar_sigma * normal(rng);
  for (int t = 0; t < T; ++t) {
    x = cfg.rho * x + cfg.ar_sigma * normal(rng);
    s.x(t, 0) = x;
  }
  for (auto& u : s.u) u = uniform(rng);
  double y_prev = TrueFunctions::b(s.u[0]) + eta + cfg.noise_sigma * normal(rng);
  for (int t = 0; t < T; ++t) {
    const double u = s.u[static_cast<std::size_t>(t)];
    const double y = TrueFunctions::b(u) + truth.a(i, 0, u) * truth.g(i, 0, y_prev) +
                     truth.a(i, 1, u) * truth.g(i, 1, s.x(t, 0)) + eta + cfg.noise_sigma * normal(rng);
    s.y[static_cast<std::size_t>(t)] = y;
    y_prev = y;
  }
  return s;
}

}  // namespace detail

/// Stationary mean of g_{.,1}(y_{t-1}) under the normalized model, found by
/// fixed-point iteration on long pilot paths from a fixed internal stream.
inline double lag_function_center(const SimulationConfig& cfg) {
  const double x_var = cfg.ar_sigma * cfg.ar_sigma / (1 - cfg.rho * cfg.rho);
  constexpr int kPilotClusters = 200, kPilotLength = 500, kIterations = 4;
  SimulationConfig pilot = cfg;
  pilot.n = kPilotClusters;
  double center = 0.0;
  for (int it = 0; it < kIterations; ++it) {
    const TrueFunctions truth(kPilotClusters, true, x_var, center);
    auto rng = detail::replication_engine(0x5eedULL, 0);
    double sum = 0.0;
    std::size_t count = 0;
    for (int i = 0; i < kPilotClusters; ++i) {
      const auto s = detail::simulate_cluster(pilot, truth, i, kPilotLength, rng);
      for (std::size_t t = 0; t + 1 < s.y.size(); ++t) {
        sum += truth.g(i, 0, s.y[t]) + center;
        ++count;
      }
    }
    center = sum / static_cast<double>(count);
  }
  return center;
}

inline TrueFunctions make_truth(const SimulationConfig& cfg) {
  if (!cfg.normalize_truth) return TrueFunctions(cfg.n, false, 0.0, 0.0);
  const double x_var = cfg.ar_sigma * cfg.ar_sigma / (1 - cfg.rho * cfg.rho);
  return TrueFunctions(cfg.n, true, x_var, lag_function_center(cfg));
}

/// One replication's panel. Replication r draws from its own stream derived
/// from (seed, r).
inline SimulatedPanel generate(const SimulationConfig& cfg, int replication, const TrueFunctions& truth) {
  cfg.validate();
  SimulatedPanel out;
  out.truth = truth;
  auto rng = detail::replication_engine(cfg.seed, static_cast<std::uint64_t>(replication));
  for (int i = 0; i < cfg.n; ++i) out.data.clusters.push_back(detail::simulate_cluster(cfg, truth, i, cfg.T, rng));
  std::tie(out.coef_partition, out.additive_partition) = true_partitions(cfg.n);
  return out;
}

inline SimulatedPanel generate(const SimulationConfig& cfg, int replication = 0) {
  cfg.validate();
  return generate(cfg, replication, make_truth(cfg));
}

// ---------------------------------------------------------------------------
// Monte-Carlo study
// ---------------------------------------------------------------------------

inline const std::array<std::string, 5>& study_function_names() {
  static const std::array<std::string, 5> names{"b", "a1", "a2", "g1", "g2"};
  return names;
}

struct StudyOptions {
  std::vector<FitMode> modes{FitMode::overfit, FitMode::underfit, FitMode::correct};
  bool use_true_partition = true;
  std::optional<double> threshold;  // cross-validated when unset
  std::vector<double> threshold_grid = default_threshold_grid();
  int cv_folds = 5;
  IdentifyOptions identify;
  std::optional<int> K0;
  std::optional<int> K;
  SolverOptions solver;
};

struct ReplicationResult {
  bool ok = false;
  std::string error;
  int K0 = 0;
  int K = 0;
  double threshold = 0.0;
  double nmi_coef_greedy = 0.0;
  double nmi_additive_greedy = 0.0;
  double nmi_coef = 0.0;
  double nmi_additive = 0.0;
  std::map<FitMode, std::array<double, 5>> ise;  // b, a1, a2, g1, g2
};

struct StudyResult {
  SimulationConfig config;
  std::vector<ReplicationResult> replications;
  NmiReport nmi_greedy;
  NmiReport nmi_refined;
  std::map<FitMode, MiseReport> mise;
  int failures = 0;
};

/// Integrated squared errors of one fitted model against the truth, in
/// response units. Truth pairs are renormalized over each cluster's own
/// sample (a to mean 1, g to mean 0, scale moved into g). Additive functions
/// are integrated in the scaled argument coordinate.
inline std::array<double, 5> study_ise(const FittedModel& model, const SimulatedPanel& sim, const ScaledPanel& scaled) {
  const auto& yrec = scaled.y_record();
  const auto& urec = scaled.u_record();
  const int n = sim.truth.num_clusters();
  const int p = model.spec.p;
  std::array<double, 5> out{};
  {
    std::vector<double> us;
    for (const auto& c : scaled.data.clusters) us.insert(us.end(), c.u.begin(), c.u.end());
    out[0] = mise([&](double s) { return yrec.unscale(model.trend(s)); },
                  [&](double s) { return TrueFunctions::b(urec.unscale(s)); }, us);
  }
  for (int i = 0; i < n; ++i) {
    const auto& raw = sim.data.clusters[static_cast<std::size_t>(i)];
    const auto& sc = scaled.data.clusters[static_cast<std::size_t>(i)];
    for (int j = 0; j < 2; ++j) {
      double a_mean = 0.0;
      for (double u : raw.u) a_mean += sim.truth.a(i, j, u);
      a_mean /= static_cast<double>(raw.u.size());
      // Argument sample of g_{i,j}: lagged responses for j < p, else the covariate.
      std::vector<double> arg_raw, arg_scaled;
      const auto& rec = j < p ? yrec : scaled.x_record(j - p);
      if (j < p) {
        arg_raw.assign(raw.y.begin(), raw.y.end() - (j + 1));
        arg_scaled.assign(sc.y.begin(), sc.y.end() - (j + 1));
      } else {
        for (Eigen::Index t = 0; t < raw.x.rows(); ++t) {
          arg_raw.push_back(raw.x(t, j - p));
          arg_scaled.push_back(sc.x(t, j - p));
        }
      }
      double g_mean = 0.0;
      for (double v : arg_raw) g_mean += sim.truth.g(i, j, v);
      g_mean /= static_cast<double>(arg_raw.size());
      const auto a_hat = model.coefficient(i, j);
      const auto g_hat = model.additive(i, j);
      out[static_cast<std::size_t>(1 + j)] +=
          mise([&](double s) { return a_hat(s); }, [&](double s) { return sim.truth.a(i, j, urec.unscale(s)) / a_mean; },
               sc.u);
      out[static_cast<std::size_t>(3 + j)] += mise(
          [&](double s) { return yrec.range() * g_hat(s); },
          [&](double s) { return (sim.truth.g(i, j, rec.unscale(s)) - g_mean) * a_mean; }, arg_scaled);
    }
  }
  for (int k = 1; k < 5; ++k) out[static_cast<std::size_t>(k)] /= n;
  return out;
}

/// generate -> K0 -> initial fit -> identification (NMI) -> K -> final fits
/// per mode (MISE). Correct fitting uses the true partitions when
/// `use_true_partition` is set, else the identified ones. K is selected once
/// with the correct-fitting partitions and shared by all modes.
inline ReplicationResult run_replication(const SimulationConfig& cfg, const StudyOptions& opts, int replication,
                                         const TrueFunctions& truth) {
  ReplicationResult r;
  try {
    const SimulatedPanel sim = generate(cfg, replication, truth);
    const ScaledPanel scaled = scale_to_unit(sim.data);
    ModelSpec spec{1, 1, 5, 5, 3};
    if (opts.K0) {
      spec.K0 = *opts.K0;
    } else {
      spec.K0 = bic_select_knots(scaled.data, spec, opts.solver).chosen;
    }
    r.K0 = spec.K0;
    const auto prep0 = prepare_panel(scaled.data, spec.p, BSplineBasis(spec.K0, spec.degree));
    const auto initial = initial_fit(prep0, opts.solver);
    const auto fam = sample_initial_families(initial, opts.identify.data_domain ? &prep0 : nullptr);
    IdentifiedStructure s;
    if (opts.threshold) {
      s = identify_structure(fam, *opts.threshold, opts.identify);
    } else {
      s = select_threshold_cv(prep0, fam, opts.threshold_grid, opts.cv_folds, opts.identify, opts.solver).structure;
    }
    r.threshold = s.threshold;
    r.nmi_coef_greedy = nmi(s.coef_greedy, sim.coef_partition);
    r.nmi_additive_greedy = nmi(s.additive_greedy, sim.additive_partition);
    r.nmi_coef = nmi(s.coef, sim.coef_partition);
    r.nmi_additive = nmi(s.additive, sim.additive_partition);

    const PairPartition& coef = opts.use_true_partition ? sim.coef_partition : s.coef;
    const PairPartition& additive = opts.use_true_partition ? sim.additive_partition : s.additive;
    spec.K = opts.K ? std::max(*opts.K, spec.K0)
                    : bic_select_final_knots(scaled.data, spec, coef, additive, opts.solver).chosen;
    r.K = spec.K;
    const auto prep = spec.K == spec.K0 ? prep0 : prepare_panel(scaled.data, spec.p, BSplineBasis(spec.K, spec.degree));
    for (FitMode mode : opts.modes) {
      const auto [cp, ap] = mode_partitions(mode, cfg.n, 2, coef, additive);
      const auto fin = final_stage(prep, initial, cp, ap, true, opts.solver);
      const auto model = assemble_model(prep, spec, cp, ap, fin.fit, fin.variances, scaled.records);
      r.ise[mode] = study_ise(model, sim, scaled);
    }
    r.ok = true;
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

inline StudyResult run_study(const SimulationConfig& cfg, const StudyOptions& opts = {}) {
  cfg.validate();
  const TrueFunctions truth = make_truth(cfg);
  StudyResult out;
  out.config = cfg;
  out.replications.resize(static_cast<std::size_t>(cfg.replications));
#pragma omp parallel for schedule(dynamic)
  for (int rep = 0; rep < cfg.replications; ++rep)
    out.replications[static_cast<std::size_t>(rep)] = run_replication(cfg, opts, rep, truth);

  std::vector<double> cg, ag, cr, ar;
  std::map<FitMode, std::array<std::vector<double>, 5>> ise;
  for (std::size_t rep = 0; rep < out.replications.size(); ++rep) {
    const auto& r = out.replications[rep];
    if (!r.ok) {
      ++out.failures;
      warn("replication " + std::to_string(rep) + " failed: " + r.error);
      continue;
    }
    cg.push_back(r.nmi_coef_greedy);
    ag.push_back(r.nmi_additive_greedy);
    cr.push_back(r.nmi_coef);
    ar.push_back(r.nmi_additive);
    for (const auto& [mode, vals] : r.ise)
      for (std::size_t k = 0; k < 5; ++k) ise[mode][k].push_back(vals[k]);
  }
  out.nmi_greedy = {summarize(cg), summarize(ag)};
  out.nmi_refined = {summarize(cr), summarize(ar)};
  for (FitMode mode : opts.modes) {
    MiseReport rep;
    rep.domain = "1%-99% sample quantile range; additive functions in the scaled argument coordinate";
    for (std::size_t k = 0; k < 5; ++k) {
      rep.functions.push_back(study_function_names()[k]);
      rep.stats.push_back(summarize(ise[mode][k]));
    }
    out.mise[mode] = std::move(rep);
  }
  return out;
}

}  // namespace pvcam
