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
#include <array>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pvcam/error.hpp"

namespace pvcam {

/// Clamped B-spline basis on [0,1] with equally spaced interior knots.
///
/// `num_basis` is the basis dimension K; the number of interior knots is
/// K - degree - 1. Both boundary knots carry multiplicity degree + 1, so the
/// first basis function is 1 at x = 0 and the last is 1 at x = 1.
class BSplineBasis {
 public:
  static constexpr int kMaxDegree = 7;

  BSplineBasis() : BSplineBasis(4, 3) {}
  BSplineBasis(int num_basis, int degree = 3) : num_basis_(num_basis), degree_(degree) {
    if (degree < 0 || degree > kMaxDegree)
      throw ConfigError("spline degree must lie in [0, " + std::to_string(kMaxDegree) + "], got " +
                        std::to_string(degree));
    if (num_basis < degree + 1)
      throw ConfigError("basis dimension " + std::to_string(num_basis) +
                        " is too small for degree " + std::to_string(degree) +
                        " (need at least " + std::to_string(degree + 1) + ")");
    const int interior = num_basis - degree - 1;
    knots_.reserve(num_basis + degree + 1);
    for (int i = 0; i <= degree; ++i) knots_.push_back(0.0);
    for (int k = 1; k <= interior; ++k)
      knots_.push_back(static_cast<double>(k) / static_cast<double>(interior + 1));
    for (int i = 0; i <= degree; ++i) knots_.push_back(1.0);
  }

  int num_basis() const noexcept { return num_basis_; }
  int degree() const noexcept { return degree_; }
  int num_interior_knots() const noexcept { return num_basis_ - degree_ - 1; }
  const std::vector<double>& knots() const noexcept { return knots_; }

  /// Index of the first nonzero basis function at x; the nonzero run is
  /// [first, first + degree].
  int first_nonzero(double x) const {
    check_domain(x);
    return span(x) - degree_;
  }

  /// The degree + 1 possibly nonzero values at x, starting at first_nonzero(x).
  /// Triangular de Boor scheme; x must already be validated.
  void local_values(double x, int& first, std::array<double, kMaxDegree + 1>& values) const {
    check_domain(x);
    const int s = span(x);
    first = s - degree_;
    std::array<double, kMaxDegree + 1> left{}, right{};
    values[0] = 1.0;
    for (int j = 1; j <= degree_; ++j) {
      left[j] = x - knots_[s + 1 - j];
      right[j] = knots_[s + j] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double temp = values[r] / (right[r + 1] + left[j - r]);
        values[r] = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      values[j] = saved;
    }
  }

  void evaluate_into(double x, Eigen::Ref<Eigen::VectorXd> out) const {
    int first = 0;
    std::array<double, kMaxDegree + 1> values{};
    local_values(x, first, values);
    out.setZero();
    for (int r = 0; r <= degree_; ++r) out[first + r] = values[r];
  }

  Eigen::VectorXd evaluate(double x) const {
    Eigen::VectorXd out(num_basis_);
    evaluate_into(x, out);
    return out;
  }

  bool operator==(const BSplineBasis& other) const {
    return num_basis_ == other.num_basis_ && degree_ == other.degree_;
  }

 private:
  void check_domain(double x) const {
    if (!(x >= 0.0 && x <= 1.0))
      throw DataError("spline argument " + std::to_string(x) +
                      " lies outside [0,1]; scale inputs before evaluation");
  }

  // Knot span s with knots[s] <= x < knots[s+1]; x == 1 maps to the last span.
  int span(double x) const {
    if (x >= 1.0) return num_basis_ - 1;
    const auto it = std::upper_bound(knots_.begin() + degree_, knots_.begin() + num_basis_, x);
    return static_cast<int>(it - knots_.begin()) - 1;
  }

  int num_basis_;
  int degree_;
  std::vector<double> knots_;
};

inline BSplineBasis build_basis(int num_basis, int degree = 3) { return BSplineBasis(num_basis, degree); }

inline Eigen::VectorXd evaluate(const BSplineBasis& basis, double x) { return basis.evaluate(x); }

/// Empirical basis means over one sample, used to center a basis so that the
/// represented function has sample mean zero.
struct CenteringRecord {
  Eigen::VectorXd means;
  std::string sample_id;
};

inline CenteringRecord center(const BSplineBasis& basis, std::span<const double> sample,
                              std::string sample_id = {}) {
  if (sample.empty()) throw DataError("cannot center basis on an empty sample '" + sample_id + "'");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(basis.num_basis());
  std::array<double, BSplineBasis::kMaxDegree + 1> values{};
  int first = 0;
  for (double x : sample) {
    basis.local_values(x, first, values);
    for (int r = 0; r <= basis.degree(); ++r) sum[first + r] += values[r];
  }
  return {sum / static_cast<double>(sample.size()), std::move(sample_id)};
}

inline void centered_into(const BSplineBasis& basis, const CenteringRecord& rec, double x,
                          Eigen::Ref<Eigen::VectorXd> out) {
  basis.evaluate_into(x, out);
  out -= rec.means;
}

inline Eigen::VectorXd centered(const BSplineBasis& basis, const CenteringRecord& rec, double x) {
  Eigen::VectorXd out(basis.num_basis());
  centered_into(basis, rec, x, out);
  return out;
}

}  // namespace pvcam
