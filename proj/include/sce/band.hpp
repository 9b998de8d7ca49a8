// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <vector>

#include "sce/memory.hpp"
#include "sce/types.hpp"

namespace sce {

/// Space-efficient band storage for windowed attention scores.
///
/// Row i holds the 2w+1 scores of query i against keys i-w .. i+w. Slot j of
/// row i refers to key index i + j - w (0-based). Slots whose key index falls
/// outside [0, key_len) are invalid: they are flagged in the validity mask and
/// always hold exactly zero. Exactly rows * (2w+1) scalars are allocated and
/// charged to the attention category of the memory ledger.
template <typename T>
class BandMatrix {
 public:
  BandMatrix(Index rows, Index key_len, std::size_t window);

  Index rows() const { return data_.rows(); }
  Index key_len() const { return key_len_; }
  std::size_t window() const { return window_; }
  Index width() const { return data_.cols(); }

  Index key_index(Index i, Index j) const { return i + j - static_cast<Index>(window_); }
  bool valid(Index i, Index j) const { return valid_[static_cast<std::size_t>(i * width() + j)]; }

  // Inclusive range of valid slots in row i; empty when first > last.
  Index first_valid(Index i) const;
  Index last_valid(Index i) const;

  T operator()(Index i, Index j) const { return data_(i, j); }

  // Writes to an invalid slot are rejected.
  void set(Index i, Index j, T value);

  const Matrix<T>& values() const { return data_; }

  // Mutable access for kernels. Callers keep invalid slots at zero; use
  // clear_invalid() after bulk writes.
  Matrix<T>& mutable_values() { return data_; }
  void clear_invalid();

  std::size_t allocated_scalars() const { return static_cast<std::size_t>(data_.size()); }

 private:
  Matrix<T> data_;
  std::vector<bool> valid_;
  Index key_len_;
  std::size_t window_;
  mem::Ticket ticket_;
};

enum class KernelPath {
  // Plain loops over every band slot, padding included (k = v = 0 outside the
  // sequence). Feeds the multiply-add instrumentation.
  reference,
  // Row-tiled vectorized loops over valid slots only, parallel across rows.
  blocked,
};

/// Dense matrix whose out-of-band entries are masked rather than numeric.
template <typename T>
struct MaskedMatrix {
  Matrix<T> values;  // NaN at masked entries
  std::vector<bool> in_band;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  bool masked(Index i, Index j) const { return !in_band[static_cast<std::size_t>(i * cols() + j)]; }
  std::optional<T> at(Index i, Index j) const {
    if (masked(i, j)) return std::nullopt;
    return values(i, j);
  }
  Matrix<T> filled(T fill) const;
};

namespace detail {

template <typename T>
BandMatrix<T> band_qk(ConstRef<T> q, ConstRef<T> k, std::size_t w, KernelPath path);

template <typename T>
Matrix<T> band_pv(const BandMatrix<T>& p, ConstRef<T> v, KernelPath path);

template <typename T>
struct QkGradients {
  Matrix<T> q;
  Matrix<T> k;
};

template <typename T>
struct PvGradients {
  BandMatrix<T> p;
  Matrix<T> v;
};

template <typename T>
QkGradients<T> band_qk_backward(const BandMatrix<T>& grad_a, ConstRef<T> q, ConstRef<T> k, std::size_t w);

template <typename T>
PvGradients<T> band_pv_backward(ConstRef<T> grad_o, const BandMatrix<T>& p, ConstRef<T> v);

template <typename T>
MaskedMatrix<T> dense_band_oracle(ConstRef<T> q, ConstRef<T> k, std::size_t w);

}  // namespace detail

using detail::PvGradients;
using detail::QkGradients;

/// Windowed query-key product: a(i, j) = <q_i, k_{i+j-w}> for valid slots.
/// K may have a different row count than Q (cross-attention segments).
template <typename DQ, typename DK>
BandMatrix<typename DQ::Scalar> band_qk(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                                        std::size_t w, KernelPath path = KernelPath::blocked) {
  using T = typename DQ::Scalar;
  return detail::band_qk<T>(ConstRef<T>(q.derived()), ConstRef<T>(k.derived()), w, path);
}

/// Band-probability times value: o_i = sum_j p(i, j) v_{i+j-w}.
template <typename T, typename DV>
Matrix<T> band_pv(const BandMatrix<T>& p, const Eigen::MatrixBase<DV>& v, KernelPath path = KernelPath::blocked) {
  return detail::band_pv<T>(p, ConstRef<T>(v.derived()), path);
}

template <typename T, typename DQ, typename DK>
QkGradients<T> band_qk_backward(const BandMatrix<T>& grad_a, const Eigen::MatrixBase<DQ>& q,
                                const Eigen::MatrixBase<DK>& k, std::size_t w) {
  return detail::band_qk_backward<T>(grad_a, ConstRef<T>(q.derived()), ConstRef<T>(k.derived()), w);
}

template <typename T, typename DO, typename DV>
PvGradients<T> band_pv_backward(const Eigen::MatrixBase<DO>& grad_o, const BandMatrix<T>& p,
                                const Eigen::MatrixBase<DV>& v) {
  return detail::band_pv_backward<T>(ConstRef<T>(grad_o.derived()), p, ConstRef<T>(v.derived()));
}

/// Full Q K^T with entries farther than w from the diagonal masked.
template <typename DQ, typename DK>
MaskedMatrix<typename DQ::Scalar> dense_band_oracle(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                                                    std::size_t w) {
  using T = typename DQ::Scalar;
  return detail::dense_band_oracle<T>(ConstRef<T>(q.derived()), ConstRef<T>(k.derived()), w);
}

/// Expands a band into a rows x target_cols matrix; entries not covered by a
/// valid band slot receive `fill`.
template <typename T>
Matrix<T> band_to_dense(const BandMatrix<T>& band, Index target_cols, T fill);

/// Same expansion with uncovered entries masked.
template <typename T>
MaskedMatrix<T> band_to_masked(const BandMatrix<T>& band, Index target_cols);

namespace detail {
template <typename T>
BandMatrix<T> dense_to_band(ConstRef<T> dense, std::size_t w);
}

/// Gathers the in-band entries of a dense rows x key_len matrix into a band.
template <typename D>
BandMatrix<typename D::Scalar> dense_to_band(const Eigen::MatrixBase<D>& dense, std::size_t w) {
  using T = typename D::Scalar;
  return detail::dense_to_band<T>(ConstRef<T>(dense.derived()), w);
}

extern template class BandMatrix<float>;
extern template class BandMatrix<double>;

}  // namespace sce
