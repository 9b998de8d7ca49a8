// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the test binaries: seeded random matrices, error
// measures and a central-difference derivative.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include "sce/types.hpp"

namespace sce::testing {

template <typename T = double>
Matrix<T> random_matrix(Index rows, Index cols, std::uint64_t seed, T scale = T(1)) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng) * scale);
  return m;
}

// max |a - b| / max(max |b|, floor)
template <typename DA, typename DB>
double max_rel_error(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, double floor = 1e-300) {
  if (a.size() == 0) return 0.0;
  const double diff = (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
  const double scale = std::max(b.template cast<double>().cwiseAbs().maxCoeff(), floor);
  return diff / scale;
}

// Relative error of one scalar derivative, with an absolute floor for
// derivatives that are numerically zero.
inline double scalar_rel_error(double analytic, double numeric, double floor = 1e-7) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Central difference of f with respect to *x.
inline double central_difference(double* x, double eps, const std::function<double()>& f) {
  const double saved = *x;
  *x = saved + eps;
  const double plus = f();
  *x = saved - eps;
  const double minus = f();
  *x = saved;
  return (plus - minus) / (2 * eps);
}

}  // namespace sce::testing
