// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <limits>

#include "sce/band.hpp"
#include "sce/flops.hpp"
#include "support.hpp"

using namespace sce;
using sce::testing::central_difference;
using sce::testing::max_rel_error;
using sce::testing::random_matrix;

namespace {

// Brute-force expansion by enumerating every dense entry and searching the
// band slot that maps onto it.
Matrix<double> expand_by_search(const BandMatrix<double>& band, Index cols) {
  Matrix<double> out = Matrix<double>::Zero(band.rows(), cols);
  for (Index i = 0; i < band.rows(); ++i) {
    for (Index c = 0; c < cols; ++c) {
      for (Index j = 0; j < band.width(); ++j) {
        // 1-based rule: column i + j - w - 1
        if ((i + 1) + (j + 1) - static_cast<Index>(band.window()) - 1 == c + 1) out(i, c) = band(i, j);
      }
    }
  }
  return out;
}

// Band filled with random values at every valid slot.
BandMatrix<double> random_band(Index rows, Index key_len, std::size_t w, std::uint64_t seed) {
  Matrix<double> dense = random_matrix(rows, key_len, seed);
  return dense_to_band(dense, w);
}

}  // namespace

TEST_CASE("band_qk: identity with w=0 yields a column of ones") {
  const Matrix<double> eye = Matrix<double>::Identity(3, 3);
  const auto a = band_qk(eye, eye, 0);
  CHECK(a.width() == 1);
  CHECK(a.values().isApprox(Matrix<double>::Ones(3, 1)));
}

TEST_CASE("band_qk: window covering the sequence reproduces Q K^T") {
  for (auto [s, sk] : {std::pair<Index, Index>{5, 5}, {4, 7}, {7, 3}}) {
    const auto q = random_matrix(s, 4, 11);
    const auto k = random_matrix(sk, 4, 12);
    const std::size_t w = static_cast<std::size_t>(std::max(s, sk) - 1);
    const auto a = band_qk(q, k, w);
    const Matrix<double> full = q * k.transpose();
    CHECK(sce::testing::max_rel_error(band_to_dense(a, sk, 0.0), full) < 1e-14);
  }
}

TEST_CASE("band_qk: matches the masked dense oracle") {
  const auto q = random_matrix(8, 4, 1);
  const auto k = random_matrix(8, 4, 2);
  const auto a = band_qk(q, k, 2);
  const auto oracle = dense_band_oracle(q, k, 2);
  for (Index i = 0; i < 8; ++i) {
    for (Index c = 0; c < 8; ++c) {
      const bool in_band = std::abs(c - i) <= 2;
      CHECK(oracle.masked(i, c) == !in_band);
    }
  }
  CHECK(max_rel_error(band_to_dense(a, 8, 0.0), oracle.filled(0.0)) < 1e-14);
}

TEST_CASE("band_qk: reference and blocked paths agree") {
  const auto q = random_matrix(13, 5, 3);
  const auto k = random_matrix(9, 5, 4);
  for (std::size_t w : {0u, 1u, 3u, 12u}) {
    const auto fast = band_qk(q, k, w, KernelPath::blocked);
    const auto slow = band_qk(q, k, w, KernelPath::reference);
    CHECK(max_rel_error(fast.values(), slow.values()) < 1e-14);
  }
}

TEST_CASE("band_qk: errors") {
  const auto q = random_matrix(4, 3, 1);
  const auto k = random_matrix(4, 2, 1);
  CHECK_THROWS_AS(band_qk(q, k, 1), std::invalid_argument);
  CHECK_THROWS_AS(band_qk(q, q, std::numeric_limits<std::size_t>::max() / 2), std::invalid_argument);
}

TEST_CASE("BandMatrix: validity follows the padding rule and storage is exact") {
  const BandMatrix<double> b(5, 5, 2);
  CHECK(b.allocated_scalars() == 5u * 5u);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 5; ++j) {
      // 1-based key column i + j - w - 1 must lie in [1, s]
      const Index key = (i + 1) + (j + 1) - 2 - 1;
      CHECK(b.valid(i, j) == (key >= 1 && key <= 5));
      CHECK(b(i, j) == 0.0);
    }
  }
  BandMatrix<double> c(2, 2, 1);
  CHECK_THROWS_AS(c.set(0, 0, 1.0), std::invalid_argument);
  c.set(0, 1, 2.0);
  CHECK(c(0, 1) == 2.0);
}

TEST_CASE("band_pv: identity band returns V, zero band returns zeros") {
  const auto v = random_matrix(6, 3, 5);
  BandMatrix<double> p(6, 6, 0);
  for (Index i = 0; i < 6; ++i) p.set(i, 0, 1.0);
  CHECK(band_pv(p, v) == v);
  const BandMatrix<double> zeros(6, 6, 2);
  CHECK(band_pv(zeros, v).isZero(0));
}

TEST_CASE("band_pv: matches dense product of the expanded band") {
  const auto p = random_band(10, 10, 3, 21);
  const auto v = random_matrix(10, 5, 22);
  const Matrix<double> expected = expand_by_search(p, 10) * v;
  CHECK(max_rel_error(band_pv(p, v), expected) < 1e-14);
  CHECK(max_rel_error(band_pv(p, v, KernelPath::reference), expected) < 1e-14);
}

TEST_CASE("band_pv: rejects V with the wrong number of rows") {
  const BandMatrix<double> p(4, 4, 1);
  CHECK_THROWS_AS(band_pv(p, random_matrix(5, 2, 1)), std::invalid_argument);
}

TEST_CASE("band_pv: padding slots never influence the output") {
  auto p = random_band(7, 7, 2, 31);
  const auto v = random_matrix(7, 3, 32);
  const auto before = band_pv(p, v);
  auto& raw = p.mutable_values();
  for (Index i = 0; i < p.rows(); ++i) {
    for (Index j = 0; j < p.width(); ++j) {
      if (!p.valid(i, j)) raw(i, j) = 1e6;
    }
  }
  CHECK(band_pv(p, v) == before);
  p.clear_invalid();
  CHECK(band_pv(p, v, KernelPath::reference) == band_pv(p, v, KernelPath::reference));
}

TEST_CASE("band_to_dense: index formula, identity pattern and round trip") {
  const auto band = random_band(6, 9, 2, 41);
  CHECK(band_to_dense(band, 9, 0.0) == expand_by_search(band, 9));

  BandMatrix<double> ones(4, 4, 0);
  for (Index i = 0; i < 4; ++i) ones.set(i, 0, 1.0);
  CHECK(band_to_dense(ones, 4, 0.0) == Matrix<double>::Identity(4, 4));

  const auto dense = random_matrix(6, 6, 42);
  const auto rt = band_to_dense(dense_to_band(dense, 1), 6, 0.0);
  for (Index i = 0; i < 6; ++i) {
    for (Index c = 0; c < 6; ++c) CHECK(rt(i, c) == (std::abs(i - c) <= 1 ? dense(i, c) : 0.0));
  }
  CHECK_THROWS_AS(band_to_dense(band, 0, 0.0), std::invalid_argument);

  const auto masked = band_to_masked(band, 9);
  CHECK(masked.masked(0, 5));
  CHECK(!masked.at(0, 5).has_value());
  CHECK(*masked.at(2, 2) == band(2, 2));
}

TEST_CASE("dense_band_oracle: full window and identity cases") {
  const auto q = random_matrix(5, 3, 51);
  const auto k = random_matrix(5, 3, 52);
  const auto full = dense_band_oracle(q, k, 4);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) CHECK(!full.masked(i, j));
  CHECK(full.filled(0.0) == Matrix<double>(q * k.transpose()));

  const Matrix<double> eye = Matrix<double>::Identity(4, 4);
  const auto diag = dense_band_oracle(eye, eye, 0);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 4; ++j) {
      if (i == j) CHECK(*diag.at(i, j) == 1.0);
      else CHECK(diag.masked(i, j));
    }
  }
}

TEST_CASE("band_qk: wider windows restrict to narrower results") {
  const auto q = random_matrix(9, 4, 61);
  const auto k = random_matrix(9, 4, 62);
  const auto narrow = band_to_dense(band_qk(q, k, 1), 9, 0.0);
  const auto wide = band_to_dense(band_qk(q, k, 3), 9, 0.0);
  for (Index i = 0; i < 9; ++i)
    for (Index c = 0; c < 9; ++c)
      if (std::abs(i - c) <= 1) CHECK(narrow(i, c) == doctest::Approx(wide(i, c)).epsilon(1e-14));
}

TEST_CASE("band_qk_backward: zero gradient and full-window reduction") {
  const auto q = random_matrix(5, 3, 71);
  const auto k = random_matrix(6, 3, 72);
  const BandMatrix<double> zero(5, 6, 1);
  const auto g0 = band_qk_backward(zero, q, k, 1);
  CHECK(g0.q.isZero(0));
  CHECK(g0.k.isZero(0));

  const Matrix<double> dense_grad = random_matrix(5, 6, 73);
  const auto band_grad = dense_to_band(dense_grad, 5);
  const auto g = band_qk_backward(band_grad, q, k, 5);
  CHECK(max_rel_error(g.q, Matrix<double>(dense_grad * k)) < 1e-14);
  CHECK(max_rel_error(g.k, Matrix<double>(dense_grad.transpose() * q)) < 1e-14);
  CHECK_THROWS_AS(band_qk_backward(band_grad, q, k, 4), std::invalid_argument);
}

TEST_CASE("band_qk_backward: finite differences of sum of squared scores") {
  Matrix<double> q = random_matrix(6, 3, 81);
  Matrix<double> k = random_matrix(6, 3, 82);
  const std::size_t w = 1;
  auto loss = [&] { return band_qk(q, k, w).values().squaredNorm(); };
  const auto a = band_qk(q, k, w);
  BandMatrix<double> grad_a(6, 6, w);
  grad_a.mutable_values() = 2.0 * a.values();
  const auto g = band_qk_backward(grad_a, q, k, w);
  for (Index i = 0; i < q.size(); ++i) {
    const double fd = central_difference(q.data() + i, 1e-5, loss);
    CHECK(sce::testing::scalar_rel_error(g.q.data()[i], fd) < 1e-6);
  }
  for (Index i = 0; i < k.size(); ++i) {
    const double fd = central_difference(k.data() + i, 1e-5, loss);
    CHECK(sce::testing::scalar_rel_error(g.k.data()[i], fd) < 1e-6);
  }
}

TEST_CASE("band_qk_backward: adjoint identity along a random direction") {
  const auto q = random_matrix(7, 4, 91);
  const auto k = random_matrix(7, 4, 92);
  const auto dq = random_matrix(7, 4, 93);
  const auto grad_a = random_band(7, 7, 2, 94);
  const double eps = 1e-5;
  const Matrix<double> qp = q + eps * dq;
  const Matrix<double> qm = q - eps * dq;
  const double lhs = (grad_a.values().cwiseProduct(band_qk(qp, k, 2).values() - band_qk(qm, k, 2).values())).sum() /
                     (2 * eps);
  const double rhs = band_qk_backward(grad_a, q, k, 2).q.cwiseProduct(dq).sum();
  CHECK(std::abs(lhs - rhs) < 1e-8 * std::max(1.0, std::abs(rhs)));
}

TEST_CASE("band_pv_backward: zero, full window, finite differences") {
  const auto v = random_matrix(7, 4, 101);
  const auto p = random_band(7, 7, 2, 102);
  const auto g0 = band_pv_backward(Matrix<double>::Zero(7, 4), p, v);
  CHECK(g0.p.values().isZero(0));
  CHECK(g0.v.isZero(0));

  const Matrix<double> dense_p = random_matrix(7, 7, 103);
  const auto full_band = dense_to_band(dense_p, 6);
  const auto grad_o = random_matrix(7, 4, 104);
  const auto gf = band_pv_backward(grad_o, full_band, v);
  CHECK(max_rel_error(band_to_dense(gf.p, 7, 0.0), Matrix<double>(grad_o * v.transpose())) < 1e-14);
  CHECK(max_rel_error(gf.v, Matrix<double>(dense_p.transpose() * grad_o)) < 1e-14);

  // L = <R, P (.)w V>
  BandMatrix<double> pm = p;
  Matrix<double> vm = v;
  const auto r = random_matrix(7, 4, 105);
  auto loss = [&] { return band_pv(pm, vm).cwiseProduct(r).sum() + band_pv(pm, vm).squaredNorm(); };
  const Matrix<double> o = band_pv(p, v);
  const Matrix<double> grad = r + 2.0 * o;
  const auto g = band_pv_backward(grad, p, v);
  for (Index i = 0; i < vm.size(); ++i) {
    const double fd = central_difference(vm.data() + i, 1e-5, loss);
    CHECK(sce::testing::scalar_rel_error(g.v.data()[i], fd) < 1e-6);
  }
  for (Index i = 0; i < pm.rows(); ++i) {
    for (Index j = 0; j < pm.width(); ++j) {
      if (!pm.valid(i, j)) {
        CHECK(g.p(i, j) == 0.0);
        continue;
      }
      const double fd = central_difference(&pm.mutable_values()(i, j), 1e-5, loss);
      CHECK(sce::testing::scalar_rel_error(g.p(i, j), fd) < 1e-6);
    }
  }
}

TEST_CASE("reference kernels count one multiply-add per band slot") {
  const auto q = random_matrix(12, 5, 111);
  const auto k = random_matrix(12, 5, 112);
  for (std::size_t w : {0u, 2u, 7u}) {
    flops::Scope scope;
    const auto a = band_qk(q, k, w, KernelPath::reference);
    CHECK(scope.count() == 12u * (2 * w + 1) * 5u);
    flops::Scope pv_scope;
    band_pv(a, k, KernelPath::reference);
    CHECK(pv_scope.count() == 12u * (2 * w + 1) * 5u);
  }
}

TEST_CASE("band buffers are charged to the attention ledger") {
  const auto before = mem::snapshot().current_of(mem::Category::attention);
  {
    BandMatrix<float> b(100, 100, 4);
    CHECK(mem::snapshot().current_of(mem::Category::attention) - before ==
          static_cast<std::int64_t>(100 * 9 * sizeof(float)));
    BandMatrix<float> copy = b;
    CHECK(mem::snapshot().current_of(mem::Category::attention) - before ==
          static_cast<std::int64_t>(2 * 100 * 9 * sizeof(float)));
  }
  CHECK(mem::snapshot().current_of(mem::Category::attention) == before);
}
