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

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/estimation.hpp"
#include "pvcam/structure_id.hpp"
#include "pvcam/tuning.hpp"

namespace pvcam {

enum class FitMode { overfit, underfit, correct };

inline std::string to_string(FitMode m) {
  switch (m) {
    case FitMode::overfit: return "overfit";
    case FitMode::underfit: return "underfit";
    case FitMode::correct: return "correct";
  }
  return "correct";
}

inline FitMode parse_fit_mode(std::string_view s) {
  if (s == "overfit") return FitMode::overfit;
  if (s == "underfit") return FitMode::underfit;
  if (s == "correct") return FitMode::correct;
  throw ConfigError("unknown fit mode '" + std::string(s) + "' (expected overfit, underfit or correct)");
}

/// Candidate thresholds for cross-validation, log-spaced.
inline std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int k = -8; k <= 8; ++k) grid.push_back(std::pow(10.0, k / 4.0));
  return grid;
}

struct PipelineOptions {
  int p = 1;
  int degree = 3;
  std::optional<int> K0;  // BIC-selected when unset
  std::optional<int> K;
  FitMode mode = FitMode::correct;
  std::optional<double> threshold;  // skips cross-validation when set
  std::vector<double> threshold_grid = default_threshold_grid();
  int cv_folds = 5;
  IdentifyOptions identify;
  // Fixed partitions for correct fitting; bypass identification when both set.
  std::optional<PairPartition> coef_partition;
  std::optional<PairPartition> additive_partition;
  bool variance_loop = true;
  SolverOptions solver;
};

struct PipelineResult {
  ScaledPanel scaled;
  ModelSpec spec;
  std::optional<BicTrace> k0_trace;
  std::optional<BicTrace> k_trace;
  InitialEstimates initial;
  std::optional<IdentifiedStructure> structure;
  std::optional<CvResult> cv;
  PairPartition coef_partition;
  PairPartition additive_partition;
  VarianceLoopResult final_fit;
  FittedModel model;
};

/// Partitions implied by a fit mode; `correct` needs the identified ones.
inline std::pair<PairPartition, PairPartition> mode_partitions(FitMode mode, int n, int d,
                                                               const std::optional<PairPartition>& coef = std::nullopt,
                                                               const std::optional<PairPartition>& additive = std::nullopt) {
  switch (mode) {
    case FitMode::overfit: return {PairPartition::singletons(n, d), PairPartition::singletons(n, d)};
    case FitMode::underfit: return {PairPartition::per_variable(n, d), PairPartition::per_variable(n, d)};
    case FitMode::correct:
      if (!coef || !additive) throw ConfigError("correct fitting needs both partitions");
      return {*coef, *additive};
  }
  throw ConfigError("unknown fit mode");
}

/// Final pooled stage on the K basis under fixed partitions, started from the
/// block-averaged initial additive estimates.
inline VarianceLoopResult final_stage(const PreparedPanel& prep, const InitialEstimates& initial,
                                      const PairPartition& coef, const PairPartition& additive, bool variance_loop,
                                      const SolverOptions& opts) {
  const auto beta0 = block_average_additive(initial, additive, prep.basis);
  if (variance_loop) return refine_variance_loop(prep, coef, additive, opts, beta0);
  VarianceLoopResult out;
  out.fit = working_independence_fit(prep, coef, additive, opts, beta0);
  out.converged = true;
  return out;
}

/// scale -> K0 -> initial fit -> partitions -> K -> variance-weighted fit.
inline PipelineResult fit_pipeline(const PanelDataset& raw, const PipelineOptions& opts) {
  PipelineResult r;
  r.scaled = scale_to_unit(raw);
  const PanelDataset& data = r.scaled.data;
  r.spec.p = opts.p;
  r.spec.q = data.num_covariates();
  r.spec.degree = opts.degree;
  if (r.spec.num_variables() < 1) throw ConfigError("model needs at least one lag or covariate");
  if (opts.K0) {
    r.spec.K0 = *opts.K0;
  } else {
    r.k0_trace = bic_select_knots(data, r.spec, opts.solver);
    r.spec.K0 = r.k0_trace->chosen;
  }
  r.spec.K = opts.K.value_or(r.spec.K0);
  r.spec.validate();

  const auto prep0 = prepare_panel(data, r.spec.p, BSplineBasis(r.spec.K0, r.spec.degree));
  r.initial = initial_fit(prep0, opts.solver);
  const int n = prep0.num_clusters(), d = prep0.num_variables();

  if (opts.mode == FitMode::correct) {
    if (opts.coef_partition && opts.additive_partition) {
      r.coef_partition = *opts.coef_partition;
      r.additive_partition = *opts.additive_partition;
    } else {
      const auto fam = sample_initial_families(r.initial, opts.identify.data_domain ? &prep0 : nullptr);
      if (opts.threshold) {
        r.structure = identify_structure(fam, *opts.threshold, opts.identify);
      } else {
        r.cv = select_threshold_cv(prep0, fam, opts.threshold_grid, opts.cv_folds, opts.identify, opts.solver);
        r.structure = r.cv->structure;
      }
      r.coef_partition = r.structure->coef;
      r.additive_partition = r.structure->additive;
    }
  } else {
    std::tie(r.coef_partition, r.additive_partition) = mode_partitions(opts.mode, n, d);
  }

  if (!opts.K) {
    r.k_trace = bic_select_final_knots(data, r.spec, r.coef_partition, r.additive_partition, opts.solver);
    r.spec.K = r.k_trace->chosen;
  }
  const auto prep = r.spec.K == r.spec.K0 ? prep0 : prepare_panel(data, r.spec.p, BSplineBasis(r.spec.K, r.spec.degree));
  r.final_fit = final_stage(prep, r.initial, r.coef_partition, r.additive_partition, opts.variance_loop, opts.solver);
  r.model = assemble_model(prep, r.spec, r.coef_partition, r.additive_partition, r.final_fit.fit,
                           r.final_fit.variances, r.scaled.records);
  return r;
}

}  // namespace pvcam
