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
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/pipeline.hpp"
#include "pvcam/structure_id.hpp"

namespace pvcam {

// ---------------------------------------------------------------------------
// MISE
// ---------------------------------------------------------------------------

/// Integral over [lo, hi] of (estimate - truth)^2, trapezoid on a uniform grid.
template <typename F, typename G>
double integrated_squared_error(const F& estimate, const G& truth, double lo, double hi,
                                int points = kQuadraturePoints) {
  if (!(hi > lo)) return 0.0;
  Eigen::VectorXd sq(points);
  for (int k = 0; k < points; ++k) {
    const double x = lo + (hi - lo) * static_cast<double>(k) / (points - 1);
    const double diff = estimate(x) - truth(x);
    sq[k] = diff * diff;
  }
  return trapezoid(sq, hi - lo);
}

/// Integrated squared error over the 1%-99% quantile range of `eval_sample`.
template <typename F, typename G>
double mise(const F& estimate, const G& truth, std::span<const double> eval_sample) {
  const auto [lo, hi] = trimmed_range(eval_sample);
  return integrated_squared_error(estimate, truth, lo, hi);
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  int count = 0;
};

/// Mean and sample standard deviation (n - 1 denominator).
inline MeanSd summarize(const std::vector<double>& values) {
  MeanSd out;
  out.count = static_cast<int>(values.size());
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

struct MiseReport {
  std::vector<std::string> functions;
  std::vector<MeanSd> stats;
  std::string domain;  // description of the integration domain
};

struct NmiReport {
  MeanSd coef;
  MeanSd additive;
};

// ---------------------------------------------------------------------------
// NMI
// ---------------------------------------------------------------------------

namespace detail {
// Sums after sorting so the result does not depend on term order.
inline double ordered_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

inline double entropy(const std::vector<int>& labels, int blocks) {
  const double n = static_cast<double>(labels.size());
  std::vector<double> counts(static_cast<std::size_t>(blocks), 0.0);
  for (int l : labels) counts[static_cast<std::size_t>(l)] += 1.0;
  std::vector<double> terms;
  for (double c : counts)
    if (c > 0) terms.push_back(-(c / n) * std::log(c / n));
  return ordered_sum(std::move(terms));
}
}  // namespace detail

/// I(P, Q) / ((H(P) + H(Q)) / 2). Two single-block partitions give 1.
inline double nmi(const PairPartition& P, const PairPartition& Q) {
  if (P.num_clusters() != Q.num_clusters() || P.num_variables() != Q.num_variables())
    throw DataError("NMI needs partitions of the same index set");
  const auto& a = P.labels();
  const auto& b = Q.labels();
  if (a.empty()) throw DataError("NMI of empty partitions");
  const double n = static_cast<double>(a.size());
  std::map<std::pair<int, int>, double> joint;
  std::vector<double> ca(static_cast<std::size_t>(P.num_blocks()), 0.0), cb(static_cast<std::size_t>(Q.num_blocks()), 0.0);
  for (std::size_t k = 0; k < a.size(); ++k) {
    joint[{a[k], b[k]}] += 1.0;
    ca[static_cast<std::size_t>(a[k])] += 1.0;
    cb[static_cast<std::size_t>(b[k])] += 1.0;
  }
  std::vector<double> terms;
  for (const auto& [key, c] : joint)
    terms.push_back((c / n) * std::log(n * c / (ca[static_cast<std::size_t>(key.first)] * cb[static_cast<std::size_t>(key.second)])));
  const double I = detail::ordered_sum(std::move(terms));
  const double ha = detail::entropy(a, P.num_blocks());
  const double hb = detail::entropy(b, Q.num_blocks());
  if (ha == 0.0 && hb == 0.0) return 1.0;
  return std::clamp(I / ((ha + hb) / 2.0), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Rolling out-of-sample prediction error
// ---------------------------------------------------------------------------

struct RollingPredictionError {
  double pe = 0.0;                           // mean over clusters and horizon
  std::vector<std::string> cluster_ids;
  std::vector<double> per_cluster;           // mean over the horizon
  std::vector<std::vector<double>> errors;   // [cluster][j - 1], squared error at day T_i - j
};

/// For j = 1..horizon, refits on days before T_i - j (1-based) and predicts
/// y at day T_i - j from that fit. Squared errors are in response units.
inline RollingPredictionError rolling_prediction_error(const PanelDataset& raw, const PipelineOptions& opts,
                                                       int horizon) {
  raw.validate();
  if (horizon < 1) throw ConfigError("prediction horizon must be positive");
  constexpr int kMinimumFit = 2;
  if (static_cast<int>(raw.min_length()) - 1 - horizon < opts.p + kMinimumFit)
    throw DataError("insufficient history for a " + std::to_string(horizon) + "-day rolling prediction");
  RollingPredictionError out;
  const std::size_t n = raw.clusters.size();
  out.errors.assign(n, std::vector<double>(static_cast<std::size_t>(horizon)));
  std::size_t clamped = 0;
  for (int j = 1; j <= horizon; ++j) {
    PanelDataset train, target;
    for (const auto& c : raw.clusters) {
      const auto tau = static_cast<Eigen::Index>(c.length()) - 1 - j;  // zero-based target index
      auto prefix = [&](Eigen::Index len) {
        ClusterSeries s;
        s.id = c.id;
        s.u.assign(c.u.begin(), c.u.begin() + len);
        s.y.assign(c.y.begin(), c.y.begin() + len);
        s.x = c.x.topRows(len);
        return s;
      };
      train.clusters.push_back(prefix(tau));
      target.clusters.push_back(prefix(tau + 1));
    }
    const auto fit = fit_pipeline(train, opts);
    const auto pred = predict(fit.model, target, &clamped);
    for (std::size_t i = 0; i < n; ++i) {
      const double e = pred[i].observed.back() - pred[i].fitted.back();
      out.errors[i][static_cast<std::size_t>(j - 1)] = e * e;
    }
  }
  if (clamped > 0) warn(std::to_string(clamped) + " value(s) were clamped to the training range during rolling prediction");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.cluster_ids.push_back(raw.clusters[i].id);
    const double s = std::accumulate(out.errors[i].begin(), out.errors[i].end(), 0.0);
    out.per_cluster.push_back(s / horizon);
    total += s;
  }
  out.pe = total / (static_cast<double>(n) * horizon);
  return out;
}

}  // namespace pvcam
