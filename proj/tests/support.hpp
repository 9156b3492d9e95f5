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

// Oracles and fixtures shared by the unit tests and the acceptance binary.

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "pvcam/pvcam.hpp"

namespace pvcam::testing {

/// Textbook Cox-de Boor recursion on an explicit knot vector, with the right
/// endpoint assigned to the last basis function.
inline double cox_de_boor(const std::vector<double>& t, int i, int k, double x) {
  if (k == 0) {
    const int last = static_cast<int>(t.size()) - 1;
    if (x == t[static_cast<std::size_t>(last)]) {
      // The last nonempty span is closed on the right.
      int s = last;
      while (s > 0 && t[static_cast<std::size_t>(s - 1)] == t[static_cast<std::size_t>(last)]) --s;
      return i == s - 1 ? 1.0 : 0.0;
    }
    return t[static_cast<std::size_t>(i)] <= x && x < t[static_cast<std::size_t>(i + 1)] ? 1.0 : 0.0;
  }
  double v = 0.0;
  const double d1 = t[static_cast<std::size_t>(i + k)] - t[static_cast<std::size_t>(i)];
  const double d2 = t[static_cast<std::size_t>(i + k + 1)] - t[static_cast<std::size_t>(i + 1)];
  if (d1 > 0) v += (x - t[static_cast<std::size_t>(i)]) / d1 * cox_de_boor(t, i, k - 1, x);
  if (d2 > 0) v += (t[static_cast<std::size_t>(i + k + 1)] - x) / d2 * cox_de_boor(t, i + 1, k - 1, x);
  return v;
}

/// Scaled panel with n clusters of length T, one covariate, p = 0 or 1 lags.
inline PanelDataset tiny_panel(int n, int T, unsigned seed, double noise = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  PanelDataset data;
  for (int i = 0; i < n; ++i) {
    ClusterSeries c;
    c.id = "k" + std::to_string(i);
    c.x.resize(T, 1);
    for (int t = 0; t < T; ++t) {
      const double u = unif(rng), x = unif(rng);
      c.u.push_back(u);
      c.x(t, 0) = x;
      const double y = 0.5 + 0.2 * std::sin(3 * u) + (1 + 0.3 * (u - 0.5) * (i + 1)) * 0.3 * std::cos(4 * x) +
                       noise * normal(rng);
      c.y.push_back(std::clamp(y, 0.0, 1.0));
    }
    data.clusters.push_back(std::move(c));
  }
  return data;
}

/// Minimizer of sum_i || W_i^{1/2} (r_i - X_i theta) ||^2 + ridge ||theta||^2
/// by Householder QR on the stacked system; W_i = I - c_i 11' is formed
/// explicitly and its square root taken by eigendecomposition.
inline Eigen::VectorXd stacked_ridge_solve(const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::VectorXd>& r,
                                           const std::vector<double>& c, double ridge) {
  const Eigen::Index P = X.front().cols();
  Eigen::Index rows = P;
  for (const auto& x : X) rows += x.rows();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(rows, P);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(rows);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const Eigen::Index T = X[i].rows();
    const Eigen::MatrixXd W = Eigen::MatrixXd::Identity(T, T) - c[i] * Eigen::MatrixXd::Ones(T, T);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W);
    const Eigen::MatrixXd root =
        es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
    A.middleRows(at, T) = root * X[i];
    rhs.segment(at, T) = root * r[i];
    at += T;
  }
  A.bottomRows(P) = std::sqrt(ridge) * Eigen::MatrixXd::Identity(P, P);
  return A.colPivHouseholderQr().solve(rhs);
}

/// Row-by-row design of the (b, alpha) half-step with beta fixed.
inline Eigen::VectorXd oracle_trend_coef(const TiedLeastSquares& ls, const TiedCoefficients& c, double ridge) {
  const int K = ls.num_basis(), H = ls.tying().num_coef_blocks;
  std::vector<Eigen::MatrixXd> X;
  std::vector<Eigen::VectorXd> r;
  for (std::size_t i = 0; i < ls.num_clusters(); ++i) {
    const auto& D = ls.design(i);
    Eigen::MatrixXd Xi = Eigen::MatrixXd::Zero(D.frames(), (1 + H) * K);
    Eigen::VectorXd ri = D.y;
    for (Eigen::Index t = 0; t < D.frames(); ++t) {
      Xi.row(t).head(K) = D.trend.row(t);
      for (std::size_t j = 0; j < D.additive.size(); ++j) {
        const double g = D.additive[j].row(t).dot(c.beta[static_cast<std::size_t>(ls.tying().additive[i][j])]);
        ri[t] -= g;
        Xi.row(t).segment((1 + ls.tying().coef[i][j]) * K, K) += g * D.coef.row(t);
      }
    }
    X.push_back(std::move(Xi));
    r.push_back(std::move(ri));
  }
  return stacked_ridge_solve(X, r, ls.shrinkage(), ridge);
}

/// Row-by-row design of the beta half-step (with b when `with_trend`).
inline Eigen::VectorXd oracle_additive(const TiedLeastSquares& ls, const TiedCoefficients& c, double ridge,
                                       bool with_trend) {
  const int K = ls.num_basis(), m = ls.tying().num_additive_blocks;
  const int off = with_trend ? 1 : 0;
  std::vector<Eigen::MatrixXd> X;
  std::vector<Eigen::VectorXd> r;
  for (std::size_t i = 0; i < ls.num_clusters(); ++i) {
    const auto& D = ls.design(i);
    Eigen::MatrixXd Xi = Eigen::MatrixXd::Zero(D.frames(), (off + m) * K);
    Eigen::VectorXd ri = D.y;
    for (Eigen::Index t = 0; t < D.frames(); ++t) {
      if (with_trend)
        Xi.row(t).head(K) = D.trend.row(t);
      else
        ri[t] -= D.trend.row(t).dot(c.trend);
      for (std::size_t j = 0; j < D.additive.size(); ++j) {
        const double a = 1.0 + D.coef.row(t).dot(c.alpha[static_cast<std::size_t>(ls.tying().coef[i][j])]);
        Xi.row(t).segment((off + ls.tying().additive[i][j]) * K, K) += a * D.additive[j].row(t);
      }
    }
    X.push_back(std::move(Xi));
    r.push_back(std::move(ri));
  }
  return stacked_ridge_solve(X, r, ls.shrinkage(), ridge);
}

inline Eigen::VectorXd stack_trend_coef(const TiedCoefficients& c) {
  Eigen::VectorXd v(c.trend.size() * static_cast<Eigen::Index>(1 + c.alpha.size()));
  v.head(c.trend.size()) = c.trend;
  for (std::size_t k = 0; k < c.alpha.size(); ++k) v.segment(static_cast<Eigen::Index>(1 + k) * c.trend.size(), c.trend.size()) = c.alpha[k];
  return v;
}

inline Eigen::VectorXd stack_additive(const TiedCoefficients& c, bool with_trend) {
  const Eigen::Index K = c.trend.size();
  const Eigen::Index off = with_trend ? 1 : 0;
  Eigen::VectorXd v(K * (off + static_cast<Eigen::Index>(c.beta.size())));
  if (with_trend) v.head(K) = c.trend;
  for (std::size_t k = 0; k < c.beta.size(); ++k) v.segment((off + static_cast<Eigen::Index>(k)) * K, K) = c.beta[k];
  return v;
}

/// Largest deviation between each half-step of an alternating run and the
/// oracle solve from the same starting point, relative to max(1, |oracle|).
struct OracleCheck {
  double max_step_error = 0.0;
  double max_objective_increase = 0.0;  // positive when the objective rose
  int half_steps = 0;
};

inline OracleCheck check_against_oracle(const TiedLeastSquares& ls, int passes, double ridge) {
  OracleCheck out;
  auto track = [&](const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
    out.max_step_error = std::max(out.max_step_error, (got - want).lpNorm<Eigen::Infinity>() / std::max(1.0, want.lpNorm<Eigen::Infinity>()));
    ++out.half_steps;
  };
  TiedCoefficients c = ls.zeros();
  {
    const Eigen::VectorXd want = oracle_additive(ls, c, ridge, true);
    ls.solve_additive(c, ridge, true);
    track(stack_additive(c, true), want);
  }
  double prev = ls.objective(c, ridge);
  for (int it = 0; it < passes; ++it) {
    const Eigen::VectorXd want_a = oracle_trend_coef(ls, c, ridge);
    ls.solve_trend_coef(c, ridge);
    track(stack_trend_coef(c), want_a);
    double cur = ls.objective(c, ridge);
    out.max_objective_increase = std::max(out.max_objective_increase, cur - prev);
    prev = cur;
    const Eigen::VectorXd want_g = oracle_additive(ls, c, ridge, false);
    ls.solve_additive(c, ridge, false);
    track(stack_additive(c, false), want_g);
    cur = ls.objective(c, ridge);
    out.max_objective_increase = std::max(out.max_objective_increase, cur - prev);
    prev = cur;
  }
  return out;
}

/// Per-cluster problem of the initial stage (one block per variable).
inline TiedLeastSquares single_cluster_problem(const PreparedPanel& prep, std::size_t i) {
  const int d = prep.num_variables();
  TyingMap tying;
  tying.num_coef_blocks = d;
  tying.num_additive_blocks = d;
  tying.coef.assign(1, std::vector<int>(static_cast<std::size_t>(d)));
  for (int j = 0; j < d; ++j) tying.coef[0][static_cast<std::size_t>(j)] = j;
  tying.additive = tying.coef;
  std::vector<DesignBlocks> design{build_design_blocks(prep.basis, prep.frames[i], prep.centering[i])};
  return TiedLeastSquares(std::move(design), std::move(tying), prep.basis.num_basis());
}

/// Least-squares spline coefficients of f on a dense grid; exact when f lies
/// in the spline space.
template <typename F>
Eigen::VectorXd spline_fit(const BSplineBasis& basis, const F& f, int points = 1001) {
  Eigen::MatrixXd X(points, basis.num_basis());
  Eigen::VectorXd y(points);
  for (int k = 0; k < points; ++k) {
    const double x = static_cast<double>(k) / (points - 1);
    X.row(k) = basis.evaluate(x).transpose();
    y[k] = f(x);
  }
  return X.colPivHouseholderQr().solve(y);
}

template <typename F>
FunctionEstimate spline_function(const BSplineBasis& basis, const F& f) {
  return FunctionEstimate::trend(basis, spline_fit(basis, f));
}

/// Compound-symmetric residual vectors r_i = eta_i 1 + eps_i.
inline std::vector<Eigen::VectorXd> compound_symmetric(int n, int T, double sigma, double sigma_eta, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd r(T);
    const double eta = sigma_eta * normal(rng);
    for (int t = 0; t < T; ++t) r[t] = eta + sigma * normal(rng);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pvcam::testing
