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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/spline_basis.hpp"

namespace pvcam {

struct SolverOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;  // relative objective change between full passes
  double ridge = 1e-8;      // added to normal-equation diagonals
  // Try a step along the last full-pass change between passes, kept only
  // when it lowers the objective.
  bool extrapolate = true;
  // Outer loop alternating variance estimation and weighted refits.
  int variance_max_iterations = 50;
  double variance_tolerance = 1e-6;
};

// ---------------------------------------------------------------------------
// Design assembly
// ---------------------------------------------------------------------------

/// Row pieces of one cluster: B(u_t), B(u_t) - ubar, and B(z_tj) - zbar_j.
struct DesignBlocks {
  Eigen::MatrixXd trend;
  Eigen::MatrixXd coef;
  std::vector<Eigen::MatrixXd> additive;
  Eigen::VectorXd y;

  Eigen::Index frames() const noexcept { return y.size(); }
};

inline DesignBlocks build_design_blocks(const BSplineBasis& basis, const ClusterFrames& frames,
                                        const ClusterCentering& centering) {
  const int K = basis.num_basis();
  const auto rows = frames.size();
  const auto d = frames.z.cols();
  if (static_cast<Eigen::Index>(centering.z.size()) != d)
    throw DataError("centering record count does not match the frame width for cluster '" + frames.id + "'");
  DesignBlocks out;
  out.y = frames.y;
  out.trend.resize(rows, K);
  out.coef.resize(rows, K);
  out.additive.assign(static_cast<std::size_t>(d), Eigen::MatrixXd(rows, K));
  Eigen::VectorXd row(K);
  for (Eigen::Index r = 0; r < rows; ++r) {
    basis.evaluate_into(frames.u[r], row);
    out.trend.row(r) = row.transpose();
    out.coef.row(r) = (row - centering.u.means).transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
      basis.evaluate_into(frames.z(r, j), row);
      out.additive[static_cast<std::size_t>(j)].row(r) = (row - centering.z[static_cast<std::size_t>(j)].means).transpose();
    }
  }
  return out;
}

/// Which shared coefficient vector each (i, j) uses.
struct TyingMap {
  int num_coef_blocks = 0;
  int num_additive_blocks = 0;
  std::vector<std::vector<int>> coef;      // [cluster][variable] -> alpha block
  std::vector<std::vector<int>> additive;  // [cluster][variable] -> beta block
};

inline TyingMap tying_from_partitions(const PairPartition& coef, const PairPartition& additive) {
  if (coef.num_clusters() != additive.num_clusters() || coef.num_variables() != additive.num_variables())
    throw DataError("coefficient and additive partitions cover different index sets");
  TyingMap map;
  map.num_coef_blocks = coef.num_blocks();
  map.num_additive_blocks = additive.num_blocks();
  const int n = coef.num_clusters(), d = coef.num_variables();
  map.coef.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(d)));
  map.additive = map.coef;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      map.coef[i][j] = coef.block_of(i, j);
      map.additive[i][j] = additive.block_of(i, j);
    }
  return map;
}

/// Trend b, coefficient blocks alpha_k and additive blocks beta_k.
struct TiedCoefficients {
  Eigen::VectorXd trend;
  std::vector<Eigen::VectorXd> alpha;
  std::vector<Eigen::VectorXd> beta;

  static TiedCoefficients zeros(int K, int num_coef, int num_additive) {
    return {Eigen::VectorXd::Zero(K), std::vector<Eigen::VectorXd>(num_coef, Eigen::VectorXd::Zero(K)),
            std::vector<Eigen::VectorXd>(num_additive, Eigen::VectorXd::Zero(K))};
  }
  double squared_norm() const {
    double s = trend.squaredNorm();
    for (const auto& a : alpha) s += a.squaredNorm();
    for (const auto& b : beta) s += b.squaredNorm();
    return s;
  }
};

/// Least-squares problem over clusters sharing a trend and tied coefficient
/// blocks, with per-cluster weight I - c_i 11'. Each half-step is an exact
/// ridge-regularized linear solve, so the penalized objective never increases.
class TiedLeastSquares {
 public:
  TiedLeastSquares(std::vector<DesignBlocks> design, TyingMap tying, int num_basis)
      : design_(std::move(design)), tying_(std::move(tying)), K_(num_basis),
        shrink_(design_.size(), 0.0) {
    if (tying_.coef.size() != design_.size() || tying_.additive.size() != design_.size())
      throw DataError("tying map does not match the number of clusters");
  }

  int num_basis() const noexcept { return K_; }
  std::size_t num_clusters() const noexcept { return design_.size(); }
  const TyingMap& tying() const noexcept { return tying_; }
  const DesignBlocks& design(std::size_t i) const { return design_.at(i); }
  const std::vector<double>& shrinkage() const noexcept { return shrink_; }

  /// Per-cluster c_i in the weight I - c_i 11'. Zero means working independence.
  void set_shrinkage(std::vector<double> c) {
    if (c.size() != design_.size()) throw DataError("shrinkage vector has the wrong length");
    shrink_ = std::move(c);
  }

  void set_variances(const VarianceComponents& v) {
    std::vector<double> c(design_.size(), 0.0);
    for (std::size_t i = 0; i < design_.size(); ++i) {
      const double T = static_cast<double>(design_[i].frames());
      const double denom = T * v.sigma_eta2 + v.sigma2;
      c[i] = denom > 0.0 ? v.sigma_eta2 / denom : 0.0;
    }
    shrink_ = std::move(c);
  }

  TiedCoefficients zeros() const { return TiedCoefficients::zeros(K_, tying_.num_coef_blocks, tying_.num_additive_blocks); }

  Eigen::VectorXd fitted(std::size_t i, const TiedCoefficients& c) const {
    const auto& D = design_[i];
    Eigen::VectorXd f = D.trend * c.trend;
    for (std::size_t j = 0; j < D.additive.size(); ++j) {
      const Eigen::VectorXd a = (D.coef * c.alpha[tying_.coef[i][j]]).array() + 1.0;
      const Eigen::VectorXd g = D.additive[j] * c.beta[tying_.additive[i][j]];
      f.array() += a.array() * g.array();
    }
    return f;
  }

  Eigen::VectorXd residuals(std::size_t i, const TiedCoefficients& c) const { return design_[i].y - fitted(i, c); }

  /// Weighted residual sum of squares, sum_i r_i'(I - c_i 11')r_i.
  double rss(const TiedCoefficients& c) const {
    double s = 0.0;
    for (std::size_t i = 0; i < design_.size(); ++i) {
      const Eigen::VectorXd r = residuals(i, c);
      s += r.squaredNorm() - shrink_[i] * r.sum() * r.sum();
    }
    return s;
  }

  double objective(const TiedCoefficients& c, double ridge) const { return rss(c) + ridge * c.squared_norm(); }

  /// Minimizes over (b, alpha) with beta held fixed.
  void solve_trend_coef(TiedCoefficients& c, double ridge) const {
    const int H = tying_.num_coef_blocks;
    const int P = (1 + H) * K_;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(P, P);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(P);
    for (std::size_t i = 0; i < design_.size(); ++i) {
      const auto& D = design_[i];
      std::vector<int> blocks{0};
      for (int b : tying_.coef[i])
        if (std::find(blocks.begin(), blocks.end(), 1 + b) == blocks.end()) blocks.push_back(1 + b);
      Eigen::MatrixXd X = Eigen::MatrixXd::Zero(D.frames(), static_cast<Eigen::Index>(blocks.size()) * K_);
      X.leftCols(K_) = D.trend;
      Eigen::VectorXd resp = D.y;
      for (std::size_t j = 0; j < D.additive.size(); ++j) {
        const Eigen::VectorXd g = D.additive[j] * c.beta[tying_.additive[i][j]];
        resp -= g;
        const auto slot = std::find(blocks.begin(), blocks.end(), 1 + tying_.coef[i][j]) - blocks.begin();
        X.middleCols(slot * K_, K_) += g.asDiagonal() * D.coef;
      }
      accumulate(X, blocks, resp, shrink_[i], G, h);
    }
    const Eigen::VectorXd theta = solve(G, h, ridge, 1, "trend/coefficient");
    c.trend = theta.head(K_);
    for (int k = 0; k < H; ++k) c.alpha[k] = project_out_constant(theta.segment((1 + k) * K_, K_));
  }

  /// Minimizes over beta (and b when `with_trend`), alpha held fixed.
  void solve_additive(TiedCoefficients& c, double ridge, bool with_trend) const {
    const int m = tying_.num_additive_blocks;
    const int offset = with_trend ? 1 : 0;
    const int P = (offset + m) * K_;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(P, P);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(P);
    for (std::size_t i = 0; i < design_.size(); ++i) {
      const auto& D = design_[i];
      std::vector<int> blocks;
      if (with_trend) blocks.push_back(0);
      for (int b : tying_.additive[i])
        if (std::find(blocks.begin(), blocks.end(), offset + b) == blocks.end()) blocks.push_back(offset + b);
      Eigen::MatrixXd X = Eigen::MatrixXd::Zero(D.frames(), static_cast<Eigen::Index>(blocks.size()) * K_);
      Eigen::VectorXd resp = D.y;
      if (with_trend)
        X.leftCols(K_) = D.trend;
      else
        resp -= D.trend * c.trend;
      for (std::size_t j = 0; j < D.additive.size(); ++j) {
        const Eigen::VectorXd a = (D.coef * c.alpha[tying_.coef[i][j]]).array() + 1.0;
        const auto slot = std::find(blocks.begin(), blocks.end(), offset + tying_.additive[i][j]) - blocks.begin();
        X.middleCols(slot * K_, K_) += a.asDiagonal() * D.additive[j];
      }
      accumulate(X, blocks, resp, shrink_[i], G, h);
    }
    const Eigen::VectorXd theta = solve(G, h, ridge, offset, "additive");
    if (with_trend) c.trend = theta.head(K_);
    for (int k = 0; k < m; ++k) c.beta[k] = project_out_constant(theta.segment((offset + k) * K_, K_));
  }

 private:
  // Centered blocks are invariant to adding a constant to every coefficient
  // (the centered basis sums to zero), so that direction is removed.
  static Eigen::VectorXd project_out_constant(const Eigen::VectorXd& v) {
    return (v.array() - v.mean()).matrix();
  }

  // Adds X'WX and X'Wr for W = I - c 11' into the global system.
  void accumulate(const Eigen::MatrixXd& X, const std::vector<int>& blocks, const Eigen::VectorXd& resp, double c,
                  Eigen::MatrixXd& G, Eigen::VectorXd& h) const {
    Eigen::MatrixXd local = X.transpose() * X;
    Eigen::VectorXd rhs = X.transpose() * resp;
    if (c != 0.0) {
      const Eigen::VectorXd s = X.colwise().sum().transpose();
      local.noalias() -= c * s * s.transpose();
      rhs -= c * resp.sum() * s;
    }
    const auto nb = blocks.size();
    for (std::size_t a = 0; a < nb; ++a) {
      h.segment(blocks[a] * K_, K_) += rhs.segment(static_cast<Eigen::Index>(a) * K_, K_);
      for (std::size_t b = 0; b < nb; ++b)
        G.block(blocks[a] * K_, blocks[b] * K_, K_, K_) +=
            local.block(static_cast<Eigen::Index>(a) * K_, static_cast<Eigen::Index>(b) * K_, K_, K_);
    }
  }

  // Blocks from `first_centered` on are centered. Their constant direction
  // does not change fitted values and the minimizer has no component along
  // it, so it is pinned by a penalty on the scale of G before factorizing.
  Eigen::VectorXd solve(Eigen::MatrixXd G, const Eigen::VectorXd& h, double ridge, int first_centered,
                        const char* what) const {
    const double pin = std::max(1.0, G.diagonal().mean()) / K_;
    for (Eigen::Index b = first_centered; b * K_ < G.rows(); ++b) G.block(b * K_, b * K_, K_, K_).array() += pin;
    G.diagonal().array() += ridge;
    // Blocks of different clusters rarely couple, so the system is factorized
    // sparsely; a fill-reducing ordering keeps the shared trend block last.
    const Eigen::SparseMatrix<double> S = G.sparseView();
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(S);
    if (ldlt.info() != Eigen::Success) throw NumericalError(std::string("singular normal equations in the ") + what + " step");
    const double floor = 1e3 * std::numeric_limits<double>::epsilon();
    const Eigen::VectorXd pivots = ldlt.vectorD();
    if (!(pivots.minCoeff() >= floor * pivots.cwiseAbs().maxCoeff()))
      throw NumericalError(std::string("singular normal equations in the ") + what + " step");
    Eigen::VectorXd theta = ldlt.solve(h);
    if (!theta.allFinite()) throw NumericalError(std::string("non-finite solution in the ") + what + " step");
    return theta;
  }

  std::vector<DesignBlocks> design_;
  TyingMap tying_;
  int K_;
  std::vector<double> shrink_;
};

// ---------------------------------------------------------------------------
// Alternating driver
// ---------------------------------------------------------------------------

struct AlternationResult {
  TiedCoefficients coeffs;
  // Penalized objective after the starting point, after every half-step and
  // after every accepted extrapolation.
  std::vector<double> objective_trace;
  FitStatus status;
};

namespace detail {

inline TiedCoefficients extrapolated(const TiedCoefficients& now, const TiedCoefficients& before, double step) {
  TiedCoefficients out = now;
  out.trend += step * (now.trend - before.trend);
  for (std::size_t k = 0; k < out.alpha.size(); ++k) out.alpha[k] += step * (now.alpha[k] - before.alpha[k]);
  for (std::size_t k = 0; k < out.beta.size(); ++k) out.beta[k] += step * (now.beta[k] - before.beta[k]);
  return out;
}

}  // namespace detail

/// Starting from `start`, alternates the (b, alpha) and beta solves until the
/// relative change of the penalized objective over a full pass falls below
/// the tolerance. When `unit_coefficient_start` is set, beta and b are first
/// fitted by one linear solve of the purely additive model (every a = 1).
inline AlternationResult alternate(const TiedLeastSquares& ls, TiedCoefficients start, bool unit_coefficient_start,
                                   const SolverOptions& opts) {
  if (!(opts.tolerance > 0.0)) throw ConfigError("solver tolerance must be positive");
  if (opts.max_iterations < 1) throw ConfigError("solver max_iterations must be positive");
  AlternationResult out;
  out.coeffs = std::move(start);
  if (unit_coefficient_start) {
    for (auto& a : out.coeffs.alpha) a.setZero();
    ls.solve_additive(out.coeffs, opts.ridge, true);
  }
  double previous = ls.objective(out.coeffs, opts.ridge);
  out.objective_trace.push_back(previous);
  out.status.converged = false;
  TiedCoefficients last_pass;
  double step = 1.0;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    if (opts.extrapolate && it > 2) {
      TiedCoefficients trial = detail::extrapolated(out.coeffs, last_pass, step);
      const double value = ls.objective(trial, opts.ridge);
      if (value < previous) {
        out.coeffs = std::move(trial);
        previous = value;
        out.objective_trace.push_back(value);
        step = std::min(2.0 * step, 64.0);
      } else {
        step = 1.0;
      }
    }
    if (opts.extrapolate) last_pass = out.coeffs;
    ls.solve_trend_coef(out.coeffs, opts.ridge);
    out.objective_trace.push_back(ls.objective(out.coeffs, opts.ridge));
    ls.solve_additive(out.coeffs, opts.ridge, false);
    const double current = ls.objective(out.coeffs, opts.ridge);
    out.objective_trace.push_back(current);
    out.status.iterations = it;
    const double scale = std::max(std::abs(previous), std::numeric_limits<double>::min());
    if (std::abs(previous - current) / scale < opts.tolerance) {
      out.status.converged = true;
      break;
    }
    previous = current;
  }
  if (!out.status.converged)
    out.status.warnings.push_back("alternating least squares did not converge within " +
                                  std::to_string(opts.max_iterations) + " iterations");
  return out;
}

// ---------------------------------------------------------------------------
// Prepared panels
// ---------------------------------------------------------------------------

/// Frames and centering records of a scaled panel on one basis.
struct PreparedPanel {
  BSplineBasis basis;
  int p = 0;
  std::vector<std::string> ids;
  std::vector<ClusterFrames> frames;
  std::vector<ClusterCentering> centering;

  int num_clusters() const noexcept { return static_cast<int>(frames.size()); }
  int num_variables() const noexcept { return frames.empty() ? 0 : static_cast<int>(frames.front().z.cols()); }
};

inline PreparedPanel prepare_panel(const PanelDataset& scaled, int p, const BSplineBasis& basis) {
  scaled.validate();
  PreparedPanel out;
  out.basis = basis;
  out.p = p;
  out.frames = build_lag_frames(scaled, p);
  for (const auto& c : scaled.clusters) {
    out.ids.push_back(c.id);
    out.centering.push_back(center_cluster(basis, c, p));
  }
  return out;
}

inline std::vector<DesignBlocks> build_design(const PreparedPanel& prep) {
  std::vector<DesignBlocks> design;
  design.reserve(prep.frames.size());
  for (std::size_t i = 0; i < prep.frames.size(); ++i)
    design.push_back(build_design_blocks(prep.basis, prep.frames[i], prep.centering[i]));
  return design;
}

// ---------------------------------------------------------------------------
// Stage 1: per-cluster initial fit
// ---------------------------------------------------------------------------

struct ClusterInitialFit {
  std::string id;
  FunctionEstimate trend;  // absorbs b(.) + eta_i
  std::vector<FunctionEstimate> coef;
  std::vector<FunctionEstimate> additive;
  double rss = 0.0;
  std::vector<double> objective_trace;
  FitStatus status;
};

struct InitialEstimates {
  BSplineBasis basis;
  int p = 0;
  std::vector<ClusterInitialFit> clusters;

  int num_clusters() const noexcept { return static_cast<int>(clusters.size()); }
  int num_variables() const noexcept { return clusters.empty() ? 0 : static_cast<int>(clusters.front().coef.size()); }
  double total_rss() const {
    double s = 0.0;
    for (const auto& c : clusters) s += c.rss;
    return s;
  }
  /// Coefficient functions in lexicographic (i, j) order.
  std::vector<FunctionEstimate> coef_family() const {
    std::vector<FunctionEstimate> out;
    for (const auto& c : clusters) out.insert(out.end(), c.coef.begin(), c.coef.end());
    return out;
  }
  std::vector<FunctionEstimate> additive_family() const {
    std::vector<FunctionEstimate> out;
    for (const auto& c : clusters) out.insert(out.end(), c.additive.begin(), c.additive.end());
    return out;
  }
};

inline ClusterInitialFit fit_single_cluster(const BSplineBasis& basis, const ClusterFrames& frames,
                                            const ClusterCentering& centering, const SolverOptions& opts) {
  const int d = static_cast<int>(frames.z.cols());
  TyingMap tying;
  tying.num_coef_blocks = d;
  tying.num_additive_blocks = d;
  tying.coef.assign(1, std::vector<int>(static_cast<std::size_t>(d)));
  for (int j = 0; j < d; ++j) tying.coef[0][j] = j;
  tying.additive = tying.coef;
  std::vector<DesignBlocks> design;
  design.push_back(build_design_blocks(basis, frames, centering));
  TiedLeastSquares ls(std::move(design), std::move(tying), basis.num_basis());

  ClusterInitialFit out;
  out.id = frames.id;
  AlternationResult res;
  try {
    res = alternate(ls, ls.zeros(), true, opts);
  } catch (const NumericalError& e) {
    throw NumericalError("cluster '" + frames.id + "': " + e.what());
  }
  out.trend = FunctionEstimate::trend(basis, res.coeffs.trend);
  for (int j = 0; j < d; ++j) {
    out.coef.push_back(FunctionEstimate::coefficient(basis, res.coeffs.alpha[j], centering.u));
    out.additive.push_back(FunctionEstimate::additive(basis, res.coeffs.beta[j], centering.z[static_cast<std::size_t>(j)]));
  }
  out.rss = ls.rss(res.coeffs);
  out.objective_trace = std::move(res.objective_trace);
  out.status = std::move(res.status);
  return out;
}

/// Fits every cluster separately on the K0 basis (objective ls1).
inline InitialEstimates initial_fit(const PreparedPanel& prep, const SolverOptions& opts = {}) {
  InitialEstimates out;
  out.basis = prep.basis;
  out.p = prep.p;
  out.clusters.resize(prep.frames.size());
  for (std::size_t i = 0; i < prep.frames.size(); ++i) {
    out.clusters[i] = fit_single_cluster(prep.basis, prep.frames[i], prep.centering[i], opts);
    for (const auto& w : out.clusters[i].status.warnings) warn("cluster '" + prep.ids[i] + "': " + w);
  }
  return out;
}

inline InitialEstimates initial_fit(const PanelDataset& scaled, const ModelSpec& spec, const SolverOptions& opts = {}) {
  spec.validate();
  if (scaled.num_covariates() != spec.q) throw DataError("dataset covariate count does not match q");
  return initial_fit(prepare_panel(scaled, spec.p, BSplineBasis(spec.K0, spec.degree)), opts);
}

// ---------------------------------------------------------------------------
// Stages 2-3: pooled fits with tied coefficients
// ---------------------------------------------------------------------------

struct PooledFit {
  TiedCoefficients coeffs;
  std::vector<double> objective_trace;
  std::vector<Eigen::VectorXd> residuals;  // per cluster, scaled units
  double rss = 0.0;                        // unweighted residual sum of squares
  VarianceComponents weights_from;         // variances used for the weight (zero: working independence)
  FitStatus status;
};

/// Block-averaged initial additive coefficients, the starting values for the
/// pooled beta blocks. When the final basis differs from the initial one the
/// averaged function is projected onto the final basis by least squares on a
/// uniform grid.
inline std::vector<Eigen::VectorXd> block_average_additive(const InitialEstimates& initial,
                                                           const PairPartition& additive_partition,
                                                           const BSplineBasis& target) {
  const auto blocks = additive_partition.blocks();
  std::vector<Eigen::VectorXd> out;
  const bool same_basis = initial.basis == target;
  constexpr int kGrid = 401;
  Eigen::MatrixXd design;
  Eigen::LDLT<Eigen::MatrixXd> projector;
  if (!same_basis) {
    design.resize(kGrid, target.num_basis());
    Eigen::VectorXd row(target.num_basis());
    for (int g = 0; g < kGrid; ++g) {
      target.evaluate_into(static_cast<double>(g) / (kGrid - 1), row);
      design.row(g) = row.transpose();
    }
    projector.compute(design.transpose() * design);
  }
  for (const auto& block : blocks) {
    if (same_basis) {
      Eigen::VectorXd avg = Eigen::VectorXd::Zero(target.num_basis());
      for (const auto& e : block) avg += initial.clusters[e.cluster].additive[e.variable].coeffs;
      out.push_back(avg / static_cast<double>(block.size()));
    } else {
      Eigen::VectorXd values = Eigen::VectorXd::Zero(kGrid);
      for (const auto& e : block) {
        const auto& f = initial.clusters[e.cluster].additive[e.variable];
        for (int g = 0; g < kGrid; ++g) values[g] += f(static_cast<double>(g) / (kGrid - 1));
      }
      values /= static_cast<double>(block.size());
      Eigen::VectorXd beta = projector.solve(design.transpose() * values);
      out.push_back((beta.array() - beta.mean()).matrix());
    }
  }
  return out;
}

namespace detail {

inline PooledFit finish_pooled(const TiedLeastSquares& ls, AlternationResult res, const VarianceComponents& v) {
  PooledFit out;
  out.coeffs = std::move(res.coeffs);
  out.objective_trace = std::move(res.objective_trace);
  out.status = std::move(res.status);
  out.weights_from = v;
  for (std::size_t i = 0; i < ls.num_clusters(); ++i) {
    out.residuals.push_back(ls.residuals(i, out.coeffs));
    out.rss += out.residuals.back().squaredNorm();
  }
  return out;
}

inline TiedLeastSquares make_pooled_problem(const PreparedPanel& prep, const PairPartition& coef_partition,
                                            const PairPartition& additive_partition) {
  if (coef_partition.num_clusters() != prep.num_clusters() || coef_partition.num_variables() != prep.num_variables())
    throw DataError("partition does not match the panel's index set");
  return TiedLeastSquares(build_design(prep), tying_from_partitions(coef_partition, additive_partition),
                          prep.basis.num_basis());
}

inline PooledFit run_pooled(const TiedLeastSquares& ls, const VarianceComponents& v,
                            const std::optional<std::vector<Eigen::VectorXd>>& beta_start,
                            const std::optional<TiedCoefficients>& warm_start, const SolverOptions& opts) {
  TiedCoefficients start = ls.zeros();
  bool unit_start = true;
  if (warm_start) {
    start = *warm_start;
    unit_start = false;
  } else if (beta_start) {
    if (static_cast<int>(beta_start->size()) != ls.tying().num_additive_blocks)
      throw DataError("initial additive blocks do not match the additive partition");
    start.beta = *beta_start;
    unit_start = false;
  }
  AlternationResult res = alternate(ls, std::move(start), unit_start, opts);
  // Averaged starts can carry extrapolated boundary coefficients and land in a
  // poor basin; the unit-coefficient start is also run and the lower penalized
  // objective is kept.
  if (beta_start && !warm_start) {
    AlternationResult unit = alternate(ls, ls.zeros(), true, opts);
    if (unit.objective_trace.back() < res.objective_trace.back()) res = std::move(unit);
  }
  return finish_pooled(ls, std::move(res), v);
}

}  // namespace detail

/// Pooled fit with identity weights (the working-independence fit). Starts
/// from the unit-coefficient additive fit and, when given, also from
/// `beta_start`; the better end point wins.
inline PooledFit working_independence_fit(const PreparedPanel& prep, const PairPartition& coef_partition,
                                          const PairPartition& additive_partition, const SolverOptions& opts = {},
                                          const std::optional<std::vector<Eigen::VectorXd>>& beta_start = std::nullopt) {
  auto ls = detail::make_pooled_problem(prep, coef_partition, additive_partition);
  return detail::run_pooled(ls, VarianceComponents{}, beta_start, std::nullopt, opts);
}

inline PooledFit working_independence_fit(const PanelDataset& scaled, const ModelSpec& spec,
                                          const PairPartition& coef_partition, const PairPartition& additive_partition,
                                          const SolverOptions& opts = {}) {
  spec.validate();
  return working_independence_fit(prepare_panel(scaled, spec.p, BSplineBasis(spec.K, spec.degree)), coef_partition,
                                  additive_partition, opts);
}

/// Minimizes sum_i || r_i r_i' - sigma2 I - sigma_eta2 11' ||_F^2 over
/// nonnegative (sigma2, sigma_eta2). The unconstrained minimizer solves a 2x2
/// system in sum T_i, sum T_i^2, sum ||r_i||^2 and sum (1'r_i)^2; if it leaves
/// the nonnegative quadrant the better of the two boundary minimizers wins.
inline VarianceComponents estimate_variance_components(const std::vector<Eigen::VectorXd>& residuals) {
  double A = 0.0, B = 0.0, r1 = 0.0, r2 = 0.0;
  for (const auto& r : residuals) {
    const double T = static_cast<double>(r.size());
    A += T;
    B += T * T;
    r1 += r.squaredNorm();
    r2 += r.sum() * r.sum();
  }
  if (A == 0.0) throw DataError("no residuals supplied for variance estimation");
  if (B - A <= 0.0)
    throw DataError("random-effect variance is unidentifiable: every cluster contributes a single residual");
  const double e = (r2 - r1) / (B - A);
  const double s = r1 / A - e;
  if (s >= 0.0 && e >= 0.0) return {s, e};
  // Objective up to a constant: A s^2 + 2 A s e + B e^2 - 2 s r1 - 2 e r2.
  auto f = [&](double ss, double ee) { return A * ss * ss + 2 * A * ss * ee + B * ee * ee - 2 * ss * r1 - 2 * ee * r2; };
  const VarianceComponents only_sigma{std::max(0.0, r1 / A), 0.0};
  const VarianceComponents only_eta{0.0, std::max(0.0, r2 / B)};
  return f(only_sigma.sigma2, 0.0) <= f(0.0, only_eta.sigma_eta2) ? only_sigma : only_eta;
}

/// Pooled fit weighted by I - sigma_eta2 / (T_i sigma_eta2 + sigma2) 11'
/// (objective fin1), where T_i counts the frames of cluster i.
inline PooledFit weighted_final_fit(const PreparedPanel& prep, const PairPartition& coef_partition,
                                    const PairPartition& additive_partition, const VarianceComponents& variances,
                                    const SolverOptions& opts = {},
                                    const std::optional<TiedCoefficients>& warm_start = std::nullopt,
                                    const std::optional<std::vector<Eigen::VectorXd>>& beta_start = std::nullopt) {
  auto ls = detail::make_pooled_problem(prep, coef_partition, additive_partition);
  ls.set_variances(variances);
  return detail::run_pooled(ls, variances, beta_start, warm_start, opts);
}

struct VarianceLoopResult {
  PooledFit fit;
  VarianceComponents variances;
  std::vector<VarianceComponents> variance_trace;
  int iterations = 0;
  bool converged = false;
};

/// Alternates variance estimation and weighted refits until the variance
/// pair stabilizes, then refits once more with the converged variances.
/// Without `start`, the first variances come from the working-independence
/// residuals. `warm_start` seeds the first fit's coefficients.
inline VarianceLoopResult refine_variance_loop(const PreparedPanel& prep, const PairPartition& coef_partition,
                                               const PairPartition& additive_partition, const SolverOptions& opts = {},
                                               const std::optional<std::vector<Eigen::VectorXd>>& beta_start = std::nullopt,
                                               const std::optional<VarianceComponents>& start = std::nullopt,
                                               const std::optional<TiedCoefficients>& warm_start = std::nullopt) {
  auto ls = detail::make_pooled_problem(prep, coef_partition, additive_partition);
  VarianceLoopResult out;
  PooledFit fit;
  VarianceComponents current;
  if (start) {
    current = *start;
    ls.set_variances(current);
    fit = detail::run_pooled(ls, current, beta_start, warm_start, opts);
  } else {
    fit = detail::run_pooled(ls, VarianceComponents{}, beta_start, warm_start, opts);
    current = estimate_variance_components(fit.residuals);
    out.variance_trace.push_back(current);
    ls.set_variances(current);
    fit = detail::run_pooled(ls, current, std::nullopt, fit.coeffs, opts);
  }
  for (int it = 1; it <= opts.variance_max_iterations; ++it) {
    out.iterations = it;
    const VarianceComponents next = estimate_variance_components(fit.residuals);
    out.variance_trace.push_back(next);
    const double dn = std::hypot(next.sigma2 - current.sigma2, next.sigma_eta2 - current.sigma_eta2);
    const double nn = std::max(std::hypot(current.sigma2, current.sigma_eta2), std::numeric_limits<double>::min());
    const bool unchanged = next.sigma2 == current.sigma2 && next.sigma_eta2 == current.sigma_eta2;
    current = next;
    if (unchanged || dn / nn < opts.variance_tolerance) {
      out.converged = true;
      if (!unchanged) {
        ls.set_variances(current);
        fit = detail::run_pooled(ls, current, std::nullopt, fit.coeffs, opts);
      }
      break;
    }
    ls.set_variances(current);
    fit = detail::run_pooled(ls, current, std::nullopt, fit.coeffs, opts);
  }
  if (!out.converged)
    fit.status.warnings.push_back("variance-component iteration did not converge within " +
                                  std::to_string(opts.variance_max_iterations) + " passes");
  out.fit = std::move(fit);
  out.variances = current;
  return out;
}

// ---------------------------------------------------------------------------
// Fitted-model assembly and prediction
// ---------------------------------------------------------------------------

/// Per-block average of the members' centering records (u records for the
/// coefficient family, argument records for the additive family).
inline std::vector<CenteringRecord> block_average_centering(const std::vector<ClusterCentering>& centering,
                                                            const PairPartition& partition, bool coefficient) {
  std::vector<CenteringRecord> out;
  for (const auto& block : partition.blocks()) {
    CenteringRecord avg{Eigen::VectorXd::Zero(centering.at(0).u.means.size()), "block-average"};
    for (const auto& e : block)
      avg.means += coefficient ? centering.at(e.cluster).u.means : centering.at(e.cluster).z.at(e.variable).means;
    avg.means /= static_cast<double>(block.size());
    out.push_back(std::move(avg));
  }
  return out;
}

inline FittedModel assemble_model(const PreparedPanel& prep, const ModelSpec& spec, const PairPartition& coef_partition,
                                  const PairPartition& additive_partition, const PooledFit& fit,
                                  const VarianceComponents& variances, std::vector<ScalingRecord> scaling) {
  FittedModel m;
  m.spec = spec;
  m.basis = prep.basis;
  m.cluster_ids = prep.ids;
  m.centering = prep.centering;
  m.trend = FunctionEstimate::trend(prep.basis, fit.coeffs.trend);
  m.coef_partition = coef_partition;
  m.additive_partition = additive_partition;
  const auto cblocks = coef_partition.blocks();
  const auto cavg = block_average_centering(prep.centering, coef_partition, true);
  for (std::size_t k = 0; k < cblocks.size(); ++k)
    m.coef_functions.push_back(FunctionEstimate::coefficient(prep.basis, fit.coeffs.alpha[k], cavg[k]));
  const auto aavg = block_average_centering(prep.centering, additive_partition, false);
  for (std::size_t k = 0; k < aavg.size(); ++k)
    m.additive_functions.push_back(FunctionEstimate::additive(prep.basis, fit.coeffs.beta[k], aavg[k]));
  for (const auto& block : additive_partition.blocks()) {
    double lo = 1.0, hi = 0.0;
    for (const auto& e : block) {
      const auto col = prep.frames[static_cast<std::size_t>(e.cluster)].z.col(e.variable);
      lo = std::min(lo, col.minCoeff());
      hi = std::max(hi, col.maxCoeff());
    }
    m.additive_support.emplace_back(lo, hi);
  }
  m.variances = variances;
  m.scaling = std::move(scaling);
  m.status = fit.status;
  return m;
}

/// Fitted values (scaled units) for frames of cluster `i` of the model.
/// Additive arguments outside their block's fitted support are moved to its
/// nearest end; `held` counts them.
inline Eigen::VectorXd predict_frames(const FittedModel& model, int i, const ClusterFrames& frames,
                                      std::size_t* held = nullptr) {
  const int d = model.spec.num_variables();
  if (frames.z.cols() != d) throw DataError("frame width does not match the fitted model");
  std::vector<FunctionEstimate> a, g;
  std::vector<std::pair<double, double>> support;
  for (int j = 0; j < d; ++j) {
    a.push_back(model.coefficient(i, j));
    g.push_back(model.additive(i, j));
    support.push_back(model.additive_support.empty()
                          ? std::pair{0.0, 1.0}
                          : model.additive_support.at(static_cast<std::size_t>(model.additive_partition.block_of(i, j))));
  }
  Eigen::VectorXd out(frames.size());
  for (Eigen::Index r = 0; r < frames.size(); ++r) {
    double v = model.trend(frames.u[r]);
    for (int j = 0; j < d; ++j) {
      const double z = std::clamp(frames.z(r, j), support[j].first, support[j].second);
      if (held && z != frames.z(r, j)) ++*held;
      v += a[j](frames.u[r]) * g[j](z);
    }
    out[r] = v;
  }
  return out;
}

struct ClusterPrediction {
  std::string id;
  std::vector<int> time;  // zero-based series positions
  std::vector<double> observed;
  std::vector<double> fitted;
};

/// In-sample or out-of-sample fitted values in the original response units.
/// Inputs outside the training range are clamped; the clamp count goes to
/// `clamped_count` when given, otherwise to a warning.
inline std::vector<ClusterPrediction> predict(const FittedModel& model, const PanelDataset& raw,
                                              std::size_t* clamped_count = nullptr) {
  const PanelDataset scaled = apply_scaling(raw, model.scaling, clamped_count);
  const auto& yrec = model.scaling.at(1);
  std::size_t held = 0;
  std::vector<ClusterPrediction> out;
  for (std::size_t c = 0; c < scaled.clusters.size(); ++c) {
    const int i = model.cluster_index(scaled.clusters[c].id);
    const auto frames = build_cluster_frames(scaled.clusters[c], model.spec.p);
    const Eigen::VectorXd fit = predict_frames(model, i, frames, &held);
    ClusterPrediction p;
    p.id = scaled.clusters[c].id;
    p.time = frames.time;
    for (Eigen::Index r = 0; r < frames.size(); ++r) {
      p.observed.push_back(raw.clusters[c].y[static_cast<std::size_t>(frames.time[static_cast<std::size_t>(r)])]);
      p.fitted.push_back(yrec.unscale(fit[r]));
    }
    out.push_back(std::move(p));
  }
  if (clamped_count)
    *clamped_count += held;
  else if (held > 0)
    warn(std::to_string(held) + " additive argument(s) were held inside their fitted support");
  return out;
}

}  // namespace pvcam
