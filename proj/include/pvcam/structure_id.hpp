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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/estimation.hpp"

namespace pvcam {

inline constexpr int kQuadraturePoints = 401;

/// Values of f on the uniform quadrature grid over [0,1].
template <typename F>
Eigen::VectorXd sample_on_grid(const F& f, int points = kQuadraturePoints) {
  Eigen::VectorXd v(points);
  for (int k = 0; k < points; ++k) v[k] = f(static_cast<double>(k) / (points - 1));
  return v;
}

/// Composite trapezoid rule for grid values spanning an interval of `width`.
inline double trapezoid(const Eigen::Ref<const Eigen::VectorXd>& values, double width = 1.0) {
  const auto n = values.size();
  if (n < 2) return 0.0;
  const double h = width / static_cast<double>(n - 1);
  return h * (values.sum() - 0.5 * (values[0] + values[n - 1]));
}

/// Integral over [0,1] of (f - g)^2.
inline double l2_sq_distance(const FunctionEstimate& f, const FunctionEstimate& g) {
  const Eigen::VectorXd diff = sample_on_grid(f) - sample_on_grid(g);
  return trapezoid(diff.array().square().matrix());
}

/// Integral over [0,1] of f^2 (the quantity the distance is normalized by).
inline double l2_sq_norm(const FunctionEstimate& f) { return trapezoid(sample_on_grid(f).array().square().matrix()); }

struct ThresholdConfig {
  double threshold = 0.1;
  double norm_floor = 1e-6;
};

/// Linear-interpolation sample quantile (the "type 7" rule).
inline double sample_quantile(std::vector<double> sample, double prob) {
  if (sample.empty()) throw DataError("quantile of an empty sample");
  std::sort(sample.begin(), sample.end());
  const double h = (static_cast<double>(sample.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sample.size() - 1);
  return sample[lo] + (h - static_cast<double>(lo)) * (sample[hi] - sample[lo]);
}

inline std::pair<double, double> trimmed_range(std::span<const double> sample, double lo_prob = 0.01,
                                               double hi_prob = 0.99) {
  std::vector<double> v(sample.begin(), sample.end());
  return {sample_quantile(v, lo_prob), sample_quantile(v, hi_prob)};
}

using Interval = std::pair<double, double>;

/// Functions over S sampled on quadrature grids, one row per (i, j) in
/// lexicographic order. grids[j] holds every element sampled on the domain of
/// variable j. Element k is only trusted on the grid index range ranges[k]
/// (its own data support); pairs are compared on the overlap of their ranges.
struct FunctionFamily {
  int num_clusters = 0;
  int num_variables = 0;
  std::vector<Interval> domains;
  std::vector<Eigen::MatrixXd> grids;
  std::vector<std::pair<int, int>> ranges;  // inclusive grid index range per element
  bool modulo_constants = false;             // compare after removing the mean on the common support

  int size() const noexcept { return num_clusters * num_variables; }
  int domain_of(int k) const noexcept { return k % num_variables; }
  double width(int j) const { return domains[static_cast<std::size_t>(j)].second - domains[static_cast<std::size_t>(j)].first; }
  std::pair<int, int> range(int k) const { return ranges[static_cast<std::size_t>(k)]; }
};

/// Samples the family. Without `domains` every variable integrates over [0,1];
/// without `supports` every element is trusted on its whole domain.
inline FunctionFamily sample_family(const std::vector<FunctionEstimate>& functions, int n, int d,
                                    std::vector<Interval> domains = {}, const std::vector<Interval>& supports = {}) {
  if (static_cast<std::size_t>(n) * static_cast<std::size_t>(d) != functions.size())
    throw DataError("function family size does not match n * d");
  if (domains.empty()) domains.assign(static_cast<std::size_t>(d), Interval{0.0, 1.0});
  if (static_cast<int>(domains.size()) != d) throw DataError("one integration domain per variable is required");
  if (!supports.empty() && supports.size() != functions.size()) throw DataError("one support interval per function is required");
  FunctionFamily fam{n, d, std::move(domains), {}, {}};
  for (int j = 0; j < d; ++j) {
    const auto [lo, hi] = fam.domains[static_cast<std::size_t>(j)];
    if (!(lo >= 0.0 && hi <= 1.0 && hi > lo)) throw DataError("integration domain must be a nonempty subinterval of [0,1]");
    Eigen::MatrixXd g(static_cast<Eigen::Index>(functions.size()), kQuadraturePoints);
    for (std::size_t k = 0; k < functions.size(); ++k)
      g.row(static_cast<Eigen::Index>(k)) =
          sample_on_grid([&](double t) { return functions[k](lo + (hi - lo) * t); }).transpose();
    fam.grids.push_back(std::move(g));
  }
  const int last = kQuadraturePoints - 1;
  for (int k = 0; k < fam.size(); ++k) {
    std::pair<int, int> r{0, last};
    if (!supports.empty()) {
      const auto [lo, hi] = fam.domains[static_cast<std::size_t>(fam.domain_of(k))];
      const auto [a, b] = supports[static_cast<std::size_t>(k)];
      r.first = std::clamp(static_cast<int>(std::ceil((a - lo) / (hi - lo) * last - 1e-9)), 0, last);
      r.second = std::clamp(static_cast<int>(std::floor((b - lo) / (hi - lo) * last + 1e-9)), 0, last);
      if (r.second - r.first < 1) r = {0, last};  // support misses the domain: trust it everywhere
    }
    fam.ranges.push_back(r);
  }
  return fam;
}

namespace detail {
// Overlap of two index ranges; falls back to `a` when they barely meet.
inline std::pair<int, int> overlap(std::pair<int, int> a, std::pair<int, int> b) {
  const std::pair<int, int> r{std::max(a.first, b.first), std::min(a.second, b.second)};
  return r.second - r.first >= 1 ? r : a;
}

inline double segment_trapezoid(const Eigen::Ref<const Eigen::RowVectorXd>& values, std::pair<int, int> r, double width) {
  const double h = width / static_cast<double>(values.size() - 1);
  const auto seg = values.segment(r.first, r.second - r.first + 1);
  return h * (seg.sum() - 0.5 * (seg[0] + seg[seg.size() - 1]));
}

// Integral of v^2 over range r, or of (v - mean_r v)^2 modulo constants.
inline double segment_sq(const FunctionFamily& fam, int j, Eigen::RowVectorXd v, std::pair<int, int> r) {
  if (fam.modulo_constants) {
    const double len = fam.width(j) * static_cast<double>(r.second - r.first) / static_cast<double>(v.size() - 1);
    v.array() -= segment_trapezoid(v, r, fam.width(j)) / len;
  }
  return segment_trapezoid(v.array().square().matrix(), r, fam.width(j));
}

inline double grid_sq_distance(const FunctionFamily& fam, int j, int a, const Eigen::RowVectorXd& other,
                               std::pair<int, int> r) {
  return segment_sq(fam, j, fam.grids[static_cast<std::size_t>(j)].row(a) - other, r);
}
inline double grid_sq_norm(const FunctionFamily& fam, int j, int a, std::pair<int, int> r) {
  return segment_sq(fam, j, fam.grids[static_cast<std::size_t>(j)].row(a), r);
}

// Normalized distance from reference a to element b on their common support.
inline double normalized_distance(const FunctionFamily& fam, int a, int b, double norm_floor, bool* normalized = nullptr) {
  const int j = fam.domain_of(a);
  const auto r = overlap(fam.range(a), fam.range(b));
  const double norm = grid_sq_norm(fam, j, a, r);
  if (normalized) *normalized = norm >= norm_floor;
  const double scale = norm >= norm_floor ? norm : 1.0;
  return grid_sq_distance(fam, j, b, fam.grids[static_cast<std::size_t>(j)].row(a), r) / scale;
}
}  // namespace detail

/// Normalized distances delta(a, b) = int (f_a - f_b)^2 / int f_a^2 over the
/// common support of a and b, each row normalized by its own reference
/// function. Entries whose reference norm falls below the floor hold the
/// unnormalized distance. With `modulo_constants` both integrands are taken
/// after removing their mean over the common support.
struct DistanceMatrix {
  Eigen::MatrixXd delta;
  std::vector<int> normalizer;   // reference index per row
  std::vector<bool> normalized;  // false where the norm floor applied on the own support
};

inline DistanceMatrix distance_matrix(const FunctionFamily& fam, double norm_floor = 1e-6) {
  const int S = fam.size();
  DistanceMatrix dm{Eigen::MatrixXd::Zero(S, S), std::vector<int>(static_cast<std::size_t>(S)),
                    std::vector<bool>(static_cast<std::size_t>(S))};
  for (int a = 0; a < S; ++a) {
    const int j = fam.domain_of(a);
    dm.normalizer[static_cast<std::size_t>(a)] = a;
    dm.normalized[static_cast<std::size_t>(a)] = detail::grid_sq_norm(fam, j, a, fam.range(a)) >= norm_floor;
    for (int b = 0; b < S; ++b)
      if (b != a) dm.delta(a, b) = detail::normalized_distance(fam, a, b, norm_floor);
  }
  return dm;
}

/// Threshold scan: the first unassigned (i, j) in lexicographic order seeds a
/// block holding every unassigned element within normalized distance
/// `threshold` of it; repeat until S is covered.
inline PairPartition greedy_partition(const FunctionFamily& fam, const ThresholdConfig& cfg) {
  if (!(cfg.threshold > 0.0)) throw ConfigError("structure threshold must be positive");
  const int S = fam.size();
  std::vector<int> labels(static_cast<std::size_t>(S), -1);
  int next = 0;
  for (int seed = 0; seed < S; ++seed) {
    if (labels[static_cast<std::size_t>(seed)] != -1) continue;
    labels[static_cast<std::size_t>(seed)] = next;
    for (int k = seed + 1; k < S; ++k) {
      if (labels[static_cast<std::size_t>(k)] != -1) continue;
      if (detail::normalized_distance(fam, seed, k, cfg.norm_floor) < cfg.threshold)
        labels[static_cast<std::size_t>(k)] = next;
    }
    ++next;
  }
  return PairPartition(fam.num_clusters, fam.num_variables, std::move(labels));
}

inline PairPartition greedy_partition(const std::vector<FunctionEstimate>& functions, int n, int d,
                                      const ThresholdConfig& cfg) {
  return greedy_partition(sample_family(functions, n, d), cfg);
}

namespace detail {
// Block means sampled on every domain: means[j].row(b). At each grid point
// only members supported there are averaged; points no member supports take
// the plain average.
inline std::vector<Eigen::MatrixXd> block_means(const FunctionFamily& fam, const PairPartition& part) {
  const int B = part.num_blocks();
  const auto& labels = part.labels();
  std::vector<Eigen::MatrixXd> means;
  for (const auto& g : fam.grids) {
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(B, g.cols()), all = sum;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(B, g.cols());
    Eigen::VectorXd count = Eigen::VectorXd::Zero(B);
    for (int k = 0; k < fam.size(); ++k) {
      const int b = labels[static_cast<std::size_t>(k)];
      const auto [lo, hi] = fam.range(k);
      all.row(b) += g.row(k);
      count[b] += 1.0;
      sum.row(b).segment(lo, hi - lo + 1) += g.row(k).segment(lo, hi - lo + 1);
      w.row(b).segment(lo, hi - lo + 1).array() += 1.0;
    }
    Eigen::MatrixXd m(B, g.cols());
    for (int b = 0; b < B; ++b)
      for (Eigen::Index c = 0; c < g.cols(); ++c) m(b, c) = w(b, c) > 0.0 ? sum(b, c) / w(b, c) : all(b, c) / count[b];
    means.push_back(std::move(m));
  }
  return means;
}
}  // namespace detail

/// Sum over elements of the squared L2 distance to their block mean, each on
/// its own support.
inline double within_block_cost(const FunctionFamily& fam, const PairPartition& part) {
  const auto means = detail::block_means(fam, part);
  double cost = 0.0;
  for (int k = 0; k < fam.size(); ++k) {
    const int j = fam.domain_of(k);
    cost += detail::grid_sq_distance(fam, j, k, means[static_cast<std::size_t>(j)].row(part.labels()[static_cast<std::size_t>(k)]),
                                     fam.range(k));
  }
  return cost;
}

struct RefineTrace {
  std::vector<double> cost;  // within-block cost of the start and after each round
  int rounds = 0;
  bool stable = false;
};

/// Block means, then nearest-mean reassignment, until assignments stop
/// changing or `max_rounds` is reached. Blocks that empty out are dropped.
/// Ties keep the current block.
inline PairPartition refine_partition(const FunctionFamily& fam, PairPartition part, int max_rounds,
                                      RefineTrace* trace = nullptr) {
  if (part.num_clusters() != fam.num_clusters || part.num_variables() != fam.num_variables)
    throw DataError("partition does not match the function family");
  if (trace) trace->cost.push_back(within_block_cost(fam, part));
  for (int round = 1; round <= max_rounds; ++round) {
    const int B = part.num_blocks();
    const auto means = detail::block_means(fam, part);
    const auto& labels = part.labels();
    std::vector<int> next(labels);
    for (int k = 0; k < fam.size(); ++k) {
      const int j = fam.domain_of(k);
      const auto& m = means[static_cast<std::size_t>(j)];
      int best = labels[static_cast<std::size_t>(k)];
      double best_cost = detail::grid_sq_distance(fam, j, k, m.row(best), fam.range(k));
      for (int b = 0; b < B; ++b) {
        const double c = detail::grid_sq_distance(fam, j, k, m.row(b), fam.range(k));
        if (c < best_cost) {
          best_cost = c;
          best = b;
        }
      }
      next[static_cast<std::size_t>(k)] = best;
    }
    PairPartition updated(fam.num_clusters, fam.num_variables, std::move(next));
    if (trace) {
      trace->rounds = round;
      trace->cost.push_back(within_block_cost(fam, updated));
    }
    if (updated == part) {
      if (trace) trace->stable = true;
      return part;
    }
    part = std::move(updated);
  }
  return part;
}

inline PairPartition refine_partition(const std::vector<FunctionEstimate>& functions, int n, int d,
                                      PairPartition part, int max_rounds, RefineTrace* trace = nullptr) {
  return refine_partition(sample_family(functions, n, d), std::move(part), max_rounds, trace);
}

// ---------------------------------------------------------------------------
// Identification of both families
// ---------------------------------------------------------------------------

struct IdentifyOptions {
  bool refine = true;
  bool data_domain = true;  // compare initial estimates on their data support instead of [0,1]
  int max_rounds = 20;
  double norm_floor = 1e-6;
};

struct IdentifiedStructure {
  double threshold = 0.0;
  PairPartition coef_greedy;
  PairPartition additive_greedy;
  PairPartition coef;      // after refinement when enabled
  PairPartition additive;
};

/// Coefficient and additive families of the initial estimates sampled once.
struct InitialFamilies {
  FunctionFamily coef;
  FunctionFamily additive;
};

/// Data supports used for the comparison of initial estimates.
struct SupportDomains {
  std::vector<Interval> coef;               // per variable: pooled u range
  std::vector<Interval> additive;           // per variable: pooled argument range
  std::vector<Interval> coef_elements;      // per (i, j): cluster u range
  std::vector<Interval> additive_elements;  // per (i, j): cluster argument range
};

/// Support of each sample is its 1%-99% quantile range, taken pooled over the
/// panel for the integration domains and per cluster for the elements.
inline SupportDomains support_domains(const PreparedPanel& prep) {
  const int d = prep.num_variables();
  auto widen = [](Interval iv) {
    if (!(iv.second > iv.first)) iv = {std::max(0.0, iv.first - 1e-3), std::min(1.0, iv.second + 1e-3)};
    return iv;
  };
  SupportDomains out;
  std::vector<double> u;
  std::vector<std::vector<double>> z(static_cast<std::size_t>(d));
  for (const auto& f : prep.frames) {
    const std::vector<double> ui(f.u.data(), f.u.data() + f.u.size());
    u.insert(u.end(), ui.begin(), ui.end());
    const Interval ur = widen(trimmed_range(ui));
    for (int j = 0; j < d; ++j) {
      std::vector<double> zj(static_cast<std::size_t>(f.size()));
      for (Eigen::Index r = 0; r < f.size(); ++r) zj[static_cast<std::size_t>(r)] = f.z(r, j);
      z[static_cast<std::size_t>(j)].insert(z[static_cast<std::size_t>(j)].end(), zj.begin(), zj.end());
      out.coef_elements.push_back(ur);
      out.additive_elements.push_back(widen(trimmed_range(zj)));
    }
  }
  out.coef.assign(static_cast<std::size_t>(d), widen(trimmed_range(u)));
  for (const auto& v : z) out.additive.push_back(widen(trimmed_range(v)));
  return out;
}

/// Samples both families; with `prep` the distances integrate over the
/// data-supported domains and additive functions are compared modulo
/// constants, otherwise everything is compared as is over [0,1].
inline InitialFamilies sample_initial_families(const InitialEstimates& initial, const PreparedPanel* prep = nullptr) {
  const int n = initial.num_clusters(), d = initial.num_variables();
  if (!prep) return {sample_family(initial.coef_family(), n, d), sample_family(initial.additive_family(), n, d)};
  const SupportDomains s = support_domains(*prep);
  InitialFamilies out{sample_family(initial.coef_family(), n, d, s.coef, s.coef_elements),
                      sample_family(initial.additive_family(), n, d, s.additive, s.additive_elements)};
  // Each cluster centers its additive functions on its own argument sample,
  // so a shared function appears shifted by a cluster-specific constant.
  out.additive.modulo_constants = true;
  return out;
}

/// The same threshold procedure runs independently on the coefficient and
/// additive families.
inline IdentifiedStructure identify_structure(const InitialFamilies& fam, double threshold,
                                              const IdentifyOptions& opts = {}) {
  IdentifiedStructure out;
  out.threshold = threshold;
  const ThresholdConfig cfg{threshold, opts.norm_floor};
  out.coef_greedy = greedy_partition(fam.coef, cfg);
  out.additive_greedy = greedy_partition(fam.additive, cfg);
  out.coef = opts.refine ? refine_partition(fam.coef, out.coef_greedy, opts.max_rounds) : out.coef_greedy;
  out.additive = opts.refine ? refine_partition(fam.additive, out.additive_greedy, opts.max_rounds) : out.additive_greedy;
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validated threshold selection
// ---------------------------------------------------------------------------

struct CvCandidate {
  double threshold = 0.0;
  int coef_blocks = 0;
  int additive_blocks = 0;
  double cv_mse = std::numeric_limits<double>::quiet_NaN();
  bool skipped = false;
};

struct CvResult {
  double threshold = 0.0;
  int coef_blocks = 0;      // H-hat
  int additive_blocks = 0;  // m-hat
  IdentifiedStructure structure;
  std::vector<CvCandidate> candidates;
};

/// Interleaved time folds: validation frames have t mod V == v; training
/// frames exclude the validation frames and any frame whose lags fall in the
/// validation fold.
inline std::pair<std::vector<bool>, std::vector<bool>> fold_masks(const ClusterFrames& f, int p, int V, int v) {
  std::vector<bool> train(static_cast<std::size_t>(f.size())), valid(static_cast<std::size_t>(f.size()));
  for (Eigen::Index r = 0; r < f.size(); ++r) {
    const int t = f.time[static_cast<std::size_t>(r)];
    const bool in_fold = t % V == v;
    bool lag_in_fold = false;
    for (int j = 1; j <= p; ++j) lag_in_fold = lag_in_fold || ((t - j) % V == v);
    valid[static_cast<std::size_t>(r)] = in_fold;
    train[static_cast<std::size_t>(r)] = !in_fold && !lag_in_fold;
  }
  return {train, valid};
}

/// V-fold cross-validated squared prediction error of the pooled
/// working-independence fit under fixed partitions (scaled units).
inline double cv_prediction_error(const PreparedPanel& prep, const PairPartition& coef, const PairPartition& additive,
                                  int V, const SolverOptions& opts) {
  double sse = 0.0;
  std::size_t count = 0;
  const auto tying = tying_from_partitions(coef, additive);
  for (int v = 0; v < V; ++v) {
    PreparedPanel train = prep;
    std::vector<DesignBlocks> valid_design;
    for (std::size_t i = 0; i < prep.frames.size(); ++i) {
      auto [tmask, vmask] = fold_masks(prep.frames[i], prep.p, V, v);
      train.frames[i] = subset_frames(prep.frames[i], tmask);
      valid_design.push_back(build_design_blocks(prep.basis, subset_frames(prep.frames[i], vmask), prep.centering[i]));
    }
    const PooledFit fit = working_independence_fit(train, coef, additive, opts);
    const TiedLeastSquares valid(std::move(valid_design), tying, prep.basis.num_basis());
    for (std::size_t i = 0; i < valid.num_clusters(); ++i) {
      const Eigen::VectorXd r = valid.residuals(i, fit.coeffs);
      sse += r.squaredNorm();
      count += static_cast<std::size_t>(r.size());
    }
  }
  if (count == 0) throw DataError("cross-validation folds contain no validation frames");
  return sse / static_cast<double>(count);
}

/// Picks the threshold whose identified partitions minimize the V-fold
/// CV error. Candidates are visited in increasing order and ties go to the
/// smaller threshold. Identical partition pairs are scored once.
inline CvResult select_threshold_cv(const PreparedPanel& prep, const InitialFamilies& fam,
                                    std::vector<double> grid, int V, const IdentifyOptions& id_opts = {},
                                    const SolverOptions& opts = {}) {
  if (V < 2) throw ConfigError("cross-validation needs at least 2 folds");
  if (grid.empty()) throw ConfigError("threshold grid is empty");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  CvResult out;
  std::map<std::pair<std::vector<int>, std::vector<int>>, double> cache;
  bool found = false;
  double best = std::numeric_limits<double>::infinity();
  for (double c : grid) {
    IdentifiedStructure s = identify_structure(fam, c, id_opts);
    CvCandidate cand{c, s.coef.num_blocks(), s.additive.num_blocks()};
    const auto key = std::make_pair(s.coef.labels(), s.additive.labels());
    if (auto it = cache.find(key); it != cache.end()) {
      cand.cv_mse = it->second;
      cand.skipped = std::isnan(it->second);
    } else {
      try {
        cand.cv_mse = cv_prediction_error(prep, s.coef, s.additive, V, opts);
      } catch (const Error& e) {
        warn("threshold " + std::to_string(c) + " skipped in cross-validation: " + e.what());
        cand.skipped = true;
      }
      cache.emplace(key, cand.cv_mse);
    }
    if (!cand.skipped && cand.cv_mse < best) {
      best = cand.cv_mse;
      out.threshold = c;
      out.coef_blocks = cand.coef_blocks;
      out.additive_blocks = cand.additive_blocks;
      out.structure = std::move(s);
      found = true;
    }
    out.candidates.push_back(cand);
  }
  if (!found) throw NumericalError("every threshold candidate failed cross-validation");
  return out;
}

}  // namespace pvcam
