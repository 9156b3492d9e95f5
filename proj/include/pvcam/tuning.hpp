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

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/estimation.hpp"

namespace pvcam {

struct BicCandidate {
  int K = 0;
  double rss = 0.0;
  double bic = 0.0;
  int complexity = 0;
};

struct BicTrace {
  std::vector<BicCandidate> candidates;
  int chosen = 0;
  double sample_size = 0.0;  // the T (or N) entering the penalty
};

/// Integers in [max(degree + 1, floor(0.5 T^(1/5))), floor(2 T^(1/5))].
inline std::pair<int, int> knot_candidate_range(double T, int degree, int lower_floor = 0) {
  if (!(T > 0)) throw ConfigError("knot selection needs a positive sample size");
  const double root = std::pow(T, 0.2);
  const int lo = std::max({degree + 1, static_cast<int>(std::floor(0.5 * root)), lower_floor});
  const int hi = static_cast<int>(std::floor(2.0 * root));
  if (lo > hi)
    throw ConfigError("empty knot candidate range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                      "] for sample size " + std::to_string(T));
  return {lo, hi};
}

inline double bic_value(double rss, int complexity, double T) {
  return std::log(rss + std::numeric_limits<double>::epsilon()) + complexity * std::log(T) / T;
}

namespace detail {
inline void pick_minimum(BicTrace& trace) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : trace.candidates)
    if (c.bic < best) {
      best = c.bic;
      trace.chosen = c.K;
    }
}
}  // namespace detail

/// BIC over the initial (per-cluster) fits. T is the shortest series length;
/// RSS sums the per-cluster residual sums of squares; complexity is
/// (2p + 2q + 1) K0.
inline BicTrace bic_select_knots(const PanelDataset& scaled, const ModelSpec& spec, const SolverOptions& opts = {}) {
  scaled.validate();
  const double T = static_cast<double>(scaled.min_length());
  const auto [lo, hi] = knot_candidate_range(T, spec.degree);
  BicTrace trace;
  trace.sample_size = T;
  for (int K0 = lo; K0 <= hi; ++K0) {
    const auto prep = prepare_panel(scaled, spec.p, BSplineBasis(K0, spec.degree));
    const double rss = initial_fit(prep, opts).total_rss();
    const int complexity = (2 * spec.p + 2 * spec.q + 1) * K0;
    trace.candidates.push_back({K0, rss, bic_value(rss, complexity, T), complexity});
  }
  detail::pick_minimum(trace);
  return trace;
}

/// BIC over pooled working-independence fits with the identified partitions.
/// N counts all frames; complexity is (H + m) K + K, and candidates start at
/// no less than K0.
inline BicTrace bic_select_final_knots(const PanelDataset& scaled, const ModelSpec& spec,
                                       const PairPartition& coef_partition, const PairPartition& additive_partition,
                                       const SolverOptions& opts = {}) {
  scaled.validate();
  double N = 0.0;
  for (const auto& c : scaled.clusters) N += static_cast<double>(c.length()) - spec.p;
  const auto [lo, hi] = knot_candidate_range(N, spec.degree, spec.K0);
  BicTrace trace;
  trace.sample_size = N;
  const int blocks = coef_partition.num_blocks() + additive_partition.num_blocks();
  for (int K = lo; K <= hi; ++K) {
    const auto prep = prepare_panel(scaled, spec.p, BSplineBasis(K, spec.degree));
    const double rss = working_independence_fit(prep, coef_partition, additive_partition, opts).rss;
    const int complexity = blocks * K + K;
    trace.candidates.push_back({K, rss, bic_value(rss, complexity, N), complexity});
  }
  detail::pick_minimum(trace);
  return trace;
}

}  // namespace pvcam
