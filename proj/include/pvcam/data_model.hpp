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
#include <compare>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pvcam/error.hpp"
#include "pvcam/spline_basis.hpp"

namespace pvcam {

// ---------------------------------------------------------------------------
// Panel data
// ---------------------------------------------------------------------------

/// One cluster's time series: index variable u, response y and a T x q
/// covariate matrix, all aligned by time.
struct ClusterSeries {
  std::string id;
  std::vector<double> u;
  std::vector<double> y;
  Eigen::MatrixXd x;

  std::size_t length() const noexcept { return y.size(); }
};

struct PanelDataset {
  std::vector<ClusterSeries> clusters;

  std::size_t num_clusters() const noexcept { return clusters.size(); }
  int num_covariates() const noexcept {
    return clusters.empty() ? 0 : static_cast<int>(clusters.front().x.cols());
  }
  std::size_t min_length() const noexcept {
    std::size_t m = std::numeric_limits<std::size_t>::max();
    for (const auto& c : clusters) m = std::min(m, c.length());
    return clusters.empty() ? 0 : m;
  }
  std::size_t total_length() const noexcept {
    std::size_t s = 0;
    for (const auto& c : clusters) s += c.length();
    return s;
  }

  void validate() const {
    if (clusters.empty()) throw DataError("panel dataset has no clusters");
    const auto q = clusters.front().x.cols();
    for (const auto& c : clusters) {
      if (c.u.size() != c.y.size() || static_cast<std::size_t>(c.x.rows()) != c.y.size())
        throw DataError("cluster '" + c.id + "' has misaligned u/y/x lengths");
      if (c.x.cols() != q)
        throw DataError("cluster '" + c.id + "' has " + std::to_string(c.x.cols()) +
                        " covariates, expected " + std::to_string(q));
      if (c.y.empty()) throw DataError("cluster '" + c.id + "' is empty");
    }
  }
};

// ---------------------------------------------------------------------------
// Scaling into [0,1]
// ---------------------------------------------------------------------------

struct ScalingRecord {
  std::string variable_id;
  double min = 0.0;
  double max = 1.0;

  double range() const noexcept { return max - min; }
  double scale(double v) const noexcept { return (v - min) / (max - min); }
  double unscale(double s) const noexcept { return min + s * (max - min); }
};

/// Scaling records in fixed order: u, y, x1..xq.
struct ScaledPanel {
  PanelDataset data;
  std::vector<ScalingRecord> records;

  const ScalingRecord& u_record() const { return records.at(0); }
  const ScalingRecord& y_record() const { return records.at(1); }
  const ScalingRecord& x_record(int l) const { return records.at(2 + l); }
};

inline std::string covariate_name(int l) { return "x" + std::to_string(l + 1); }

/// Pooled min-max scaling of y and every covariate. The index variable u is
/// left untouched when it already lies in [0,1] and min-max scaled otherwise.
inline ScaledPanel scale_to_unit(const PanelDataset& raw) {
  raw.validate();
  const int q = raw.num_covariates();
  auto pooled_range = [&](auto&& value_of, const std::string& name) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& c : raw.clusters)
      for (std::size_t t = 0; t < c.length(); ++t) {
        const double v = value_of(c, t);
        if (!std::isfinite(v)) throw DataError("variable '" + name + "' has a non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    return std::pair{lo, hi};
  };

  ScaledPanel out;
  auto [ulo, uhi] = pooled_range([](const ClusterSeries& c, std::size_t t) { return c.u[t]; }, "u");
  if (ulo >= 0.0 && uhi <= 1.0) {
    out.records.push_back({"u", 0.0, 1.0});
  } else {
    if (!(uhi > ulo)) throw DataError("variable 'u' is constant across the panel");
    out.records.push_back({"u", ulo, uhi});
  }
  auto [ylo, yhi] = pooled_range([](const ClusterSeries& c, std::size_t t) { return c.y[t]; }, "y");
  if (!(yhi > ylo)) throw DataError("variable 'y' is constant across the panel");
  out.records.push_back({"y", ylo, yhi});
  for (int l = 0; l < q; ++l) {
    const auto name = covariate_name(l);
    auto [lo, hi] = pooled_range([l](const ClusterSeries& c, std::size_t t) { return c.x(t, l); }, name);
    if (!(hi > lo)) throw DataError("variable '" + name + "' is constant across the panel");
    out.records.push_back({name, lo, hi});
  }

  out.data = raw;
  for (auto& c : out.data.clusters) {
    for (auto& v : c.u) v = out.records[0].scale(v);
    for (auto& v : c.y) v = out.records[1].scale(v);
    for (int l = 0; l < q; ++l)
      for (Eigen::Index t = 0; t < c.x.rows(); ++t) c.x(t, l) = out.records[2 + l].scale(c.x(t, l));
  }
  return out;
}

/// Applies existing records to new data. Values that leave [0,1] are clamped
/// and a single warning is issued.
inline PanelDataset apply_scaling(const PanelDataset& raw, const std::vector<ScalingRecord>& records,
                                  std::size_t* clamped_count = nullptr) {
  raw.validate();
  const int q = raw.num_covariates();
  if (static_cast<int>(records.size()) != q + 2)
    throw DataError("scaling records do not match the dataset's covariate count");
  std::size_t clamped = 0;
  auto map = [&](const ScalingRecord& r, double v) {
    double s = r.scale(v);
    if (s < 0.0 || s > 1.0) {
      ++clamped;
      s = std::clamp(s, 0.0, 1.0);
    }
    return s;
  };
  PanelDataset out = raw;
  for (auto& c : out.clusters) {
    for (auto& v : c.u) v = map(records[0], v);
    for (auto& v : c.y) v = map(records[1], v);
    for (int l = 0; l < q; ++l)
      for (Eigen::Index t = 0; t < c.x.rows(); ++t) c.x(t, l) = map(records[2 + l], c.x(t, l));
  }
  if (clamped_count) *clamped_count += clamped;
  else if (clamped > 0)
    warn(std::to_string(clamped) + " value(s) fell outside the training range and were clamped to [0,1]");
  return out;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelSpec {
  int p = 1;       // response lags
  int q = 1;       // covariates
  int K0 = 5;      // basis dimension, initial stage
  int K = 5;       // basis dimension, final stage
  int degree = 3;

  int num_variables() const noexcept { return p + q; }

  void validate(bool warn_if_equal = false) const {
    if (p < 0) throw ConfigError("number of lags p must be nonnegative");
    if (q < 1) throw ConfigError("number of covariates q must be positive");
    if (K0 < degree + 1 || K < degree + 1)
      throw ConfigError("basis dimensions K0=" + std::to_string(K0) + ", K=" + std::to_string(K) +
                        " must be at least degree + 1 = " + std::to_string(degree + 1));
    if (K < K0) throw ConfigError("final basis dimension K must be at least K0");
    if (warn_if_equal && K == K0) warn("final basis dimension K equals K0; pooled fits usually support a larger K");
  }
};

// ---------------------------------------------------------------------------
// Lag frames and per-cluster centering
// ---------------------------------------------------------------------------

/// Aligned rows t = p+1..T_i of one cluster. Column j-1 of `z` holds the lag
/// y_{t-j} for j <= p; column p+l-1 holds covariate x_{t,l}.
struct ClusterFrames {
  std::string id;
  std::vector<int> time;  // zero-based position of each frame in the series
  Eigen::VectorXd y;
  Eigen::VectorXd u;
  Eigen::MatrixXd z;

  Eigen::Index size() const noexcept { return y.size(); }
};

inline ClusterFrames build_cluster_frames(const ClusterSeries& c, int p) {
  const auto T = static_cast<int>(c.length());
  if (T <= p)
    throw DataError("cluster '" + c.id + "' has " + std::to_string(T) + " observations, need more than p = " +
                    std::to_string(p));
  const int q = static_cast<int>(c.x.cols());
  const int rows = T - p;
  ClusterFrames f;
  f.id = c.id;
  f.time.resize(rows);
  f.y.resize(rows);
  f.u.resize(rows);
  f.z.resize(rows, p + q);
  for (int r = 0; r < rows; ++r) {
    const int t = p + r;
    f.time[r] = t;
    f.y[r] = c.y[t];
    f.u[r] = c.u[t];
    for (int j = 1; j <= p; ++j) f.z(r, j - 1) = c.y[t - j];
    for (int l = 0; l < q; ++l) f.z(r, p + l) = c.x(t, l);
  }
  return f;
}

inline std::vector<ClusterFrames> build_lag_frames(const PanelDataset& data, int p) {
  if (p < 0) throw ConfigError("number of lags p must be nonnegative");
  std::vector<ClusterFrames> out;
  out.reserve(data.clusters.size());
  for (const auto& c : data.clusters) out.push_back(build_cluster_frames(c, p));
  return out;
}

/// Keeps only the frames whose positions are flagged in `keep`.
inline ClusterFrames subset_frames(const ClusterFrames& f, const std::vector<bool>& keep) {
  ClusterFrames out;
  out.id = f.id;
  std::vector<Eigen::Index> rows;
  for (Eigen::Index r = 0; r < f.size(); ++r)
    if (keep[static_cast<std::size_t>(r)]) rows.push_back(r);
  const auto m = static_cast<Eigen::Index>(rows.size());
  out.time.resize(rows.size());
  out.y.resize(m);
  out.u.resize(m);
  out.z.resize(m, f.z.cols());
  for (Eigen::Index k = 0; k < m; ++k) {
    out.time[static_cast<std::size_t>(k)] = f.time[static_cast<std::size_t>(rows[k])];
    out.y[k] = f.y[rows[k]];
    out.u[k] = f.u[rows[k]];
    out.z.row(k) = f.z.row(rows[k]);
  }
  return out;
}

/// Basis means of one cluster: u over the whole series, lag j over
/// y_1..y_{T-j}, covariate l over the whole series.
struct ClusterCentering {
  CenteringRecord u;
  std::vector<CenteringRecord> z;
};

inline ClusterCentering center_cluster(const BSplineBasis& basis, const ClusterSeries& c, int p) {
  const auto T = c.length();
  ClusterCentering out;
  out.u = center(basis, c.u, c.id + ":u");
  for (int j = 1; j <= p; ++j) {
    if (static_cast<std::size_t>(j) >= T)
      throw DataError("cluster '" + c.id + "' is too short for lag " + std::to_string(j));
    out.z.push_back(center(basis, std::span<const double>(c.y.data(), T - j), c.id + ":ylag" + std::to_string(j)));
  }
  std::vector<double> col(T);
  for (Eigen::Index l = 0; l < c.x.cols(); ++l) {
    for (std::size_t t = 0; t < T; ++t) col[t] = c.x(static_cast<Eigen::Index>(t), l);
    out.z.push_back(center(basis, col, c.id + ":" + covariate_name(static_cast<int>(l))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimated functions
// ---------------------------------------------------------------------------

enum class FunctionKind { trend, coefficient, additive };

/// A spline-represented function. Trend: B(x)'c. Coefficient: 1 + (B(x) - m)'c.
/// Additive: (B(x) - m)'c, with m the centering means.
struct FunctionEstimate {
  FunctionKind kind = FunctionKind::trend;
  Eigen::VectorXd coeffs;
  BSplineBasis basis;
  std::optional<CenteringRecord> centering;
  double offset = 0.0;

  double operator()(double x) const {
    std::array<double, BSplineBasis::kMaxDegree + 1> values{};
    int first = 0;
    basis.local_values(x, first, values);
    double v = offset;
    for (int r = 0; r <= basis.degree(); ++r) v += values[r] * coeffs[first + r];
    if (centering) v -= centering->means.dot(coeffs);
    return v;
  }

  static FunctionEstimate trend(const BSplineBasis& basis, Eigen::VectorXd coeffs) {
    return {FunctionKind::trend, std::move(coeffs), basis, std::nullopt, 0.0};
  }
  static FunctionEstimate coefficient(const BSplineBasis& basis, Eigen::VectorXd coeffs, CenteringRecord c) {
    return {FunctionKind::coefficient, std::move(coeffs), basis, std::move(c), 1.0};
  }
  static FunctionEstimate additive(const BSplineBasis& basis, Eigen::VectorXd coeffs, CenteringRecord c) {
    return {FunctionKind::additive, std::move(coeffs), basis, std::move(c), 0.0};
  }
};

// ---------------------------------------------------------------------------
// Partitions of S = {(i, j)}
// ---------------------------------------------------------------------------

struct IndexPair {
  int cluster = 0;   // zero-based i
  int variable = 0;  // zero-based j
  auto operator<=>(const IndexPair&) const = default;
};

/// Partition of the index set {(i, j): i < n, j < d} stored as one block
/// label per pair in lexicographic order. Labels are canonical: block ids are
/// numbered by first appearance, so equal partitions compare equal.
class PairPartition {
 public:
  PairPartition() = default;

  PairPartition(int num_clusters, int num_variables, std::vector<int> labels)
      : n_(num_clusters), d_(num_variables), labels_(std::move(labels)) {
    if (n_ < 0 || d_ < 0 || labels_.size() != static_cast<std::size_t>(n_) * static_cast<std::size_t>(d_))
      throw DataError("partition label count does not match the index set size");
    canonicalize();
  }

  static PairPartition from_blocks(int num_clusters, int num_variables,
                                   const std::vector<std::vector<IndexPair>>& blocks) {
    const std::size_t size = static_cast<std::size_t>(num_clusters) * static_cast<std::size_t>(num_variables);
    std::vector<int> labels(size, -1);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].empty()) throw DataError("partition block " + std::to_string(b) + " is empty");
      for (const auto& e : blocks[b]) {
        if (e.cluster < 0 || e.cluster >= num_clusters || e.variable < 0 || e.variable >= num_variables)
          throw DataError("partition element (" + std::to_string(e.cluster) + "," + std::to_string(e.variable) +
                          ") is outside the index set");
        auto& slot = labels[static_cast<std::size_t>(e.cluster) * num_variables + e.variable];
        if (slot != -1)
          throw DataError("partition blocks overlap at (" + std::to_string(e.cluster) + "," +
                          std::to_string(e.variable) + ")");
        slot = static_cast<int>(b);
      }
    }
    for (std::size_t k = 0; k < size; ++k)
      if (labels[k] == -1)
        throw DataError("partition does not cover (" + std::to_string(k / num_variables) + "," +
                        std::to_string(k % num_variables) + ")");
    return PairPartition(num_clusters, num_variables, std::move(labels));
  }

  /// Every (i, j) in its own block (overfitting).
  static PairPartition singletons(int n, int d) {
    std::vector<int> labels(static_cast<std::size_t>(n) * d);
    for (std::size_t k = 0; k < labels.size(); ++k) labels[k] = static_cast<int>(k);
    return PairPartition(n, d, std::move(labels));
  }

  /// One block per variable j shared by all clusters (underfitting).
  static PairPartition per_variable(int n, int d) {
    std::vector<int> labels(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) labels[static_cast<std::size_t>(i) * d + j] = j;
    return PairPartition(n, d, std::move(labels));
  }

  int num_clusters() const noexcept { return n_; }
  int num_variables() const noexcept { return d_; }
  std::size_t size() const noexcept { return labels_.size(); }
  int num_blocks() const noexcept { return num_blocks_; }
  const std::vector<int>& labels() const noexcept { return labels_; }

  int block_of(int i, int j) const { return labels_.at(static_cast<std::size_t>(i) * d_ + j); }
  int block_of(IndexPair e) const { return block_of(e.cluster, e.variable); }

  std::vector<std::vector<IndexPair>> blocks() const {
    std::vector<std::vector<IndexPair>> out(static_cast<std::size_t>(num_blocks_));
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < d_; ++j) out[static_cast<std::size_t>(block_of(i, j))].push_back({i, j});
    return out;
  }

  bool operator==(const PairPartition& other) const {
    return n_ == other.n_ && d_ == other.d_ && labels_ == other.labels_;
  }

 private:
  void canonicalize() {
    std::vector<std::pair<int, int>> seen;  // (old label, new label)
    int next = 0;
    for (auto& l : labels_) {
      auto it = std::find_if(seen.begin(), seen.end(), [l](const auto& s) { return s.first == l; });
      if (it == seen.end()) {
        seen.emplace_back(l, next);
        l = next++;
      } else {
        l = it->second;
      }
    }
    num_blocks_ = next;
  }

  int n_ = 0;
  int d_ = 0;
  std::vector<int> labels_;
  int num_blocks_ = 0;
};

// ---------------------------------------------------------------------------
// Variance components and fitted models
// ---------------------------------------------------------------------------

/// Within-cluster covariance sigma2 * I + sigma_eta2 * 11'.
struct VarianceComponents {
  double sigma2 = 0.0;
  double sigma_eta2 = 0.0;
};

struct FitStatus {
  bool converged = true;
  int iterations = 0;
  std::vector<std::string> warnings;
};

struct FittedModel {
  ModelSpec spec;
  BSplineBasis basis;
  std::vector<std::string> cluster_ids;
  std::vector<ClusterCentering> centering;
  FunctionEstimate trend;
  PairPartition coef_partition;
  PairPartition additive_partition;
  // One function per block. The centering stored here is the average of the
  // members' centering records and is meant for plotting; use coefficient()
  // and additive() for the exact per-pair functions.
  std::vector<FunctionEstimate> coef_functions;
  std::vector<FunctionEstimate> additive_functions;
  // Scaled argument range each additive block was fitted on; prediction holds
  // arguments inside it. Empty means no limit beyond [0,1].
  std::vector<std::pair<double, double>> additive_support;
  VarianceComponents variances;
  std::vector<ScalingRecord> scaling;
  FitStatus status;

  int num_clusters() const noexcept { return static_cast<int>(cluster_ids.size()); }

  FunctionEstimate coefficient(int i, int j) const {
    const auto& block = coef_functions.at(static_cast<std::size_t>(coef_partition.block_of(i, j)));
    return FunctionEstimate::coefficient(basis, block.coeffs, centering.at(static_cast<std::size_t>(i)).u);
  }

  FunctionEstimate additive(int i, int j) const {
    const auto& block = additive_functions.at(static_cast<std::size_t>(additive_partition.block_of(i, j)));
    return FunctionEstimate::additive(basis, block.coeffs,
                                      centering.at(static_cast<std::size_t>(i)).z.at(static_cast<std::size_t>(j)));
  }

  int cluster_index(const std::string& id) const {
    auto it = std::find(cluster_ids.begin(), cluster_ids.end(), id);
    if (it == cluster_ids.end()) throw DataError("cluster '" + id + "' is not part of the fitted model");
    return static_cast<int>(it - cluster_ids.begin());
  }
};

}  // namespace pvcam
