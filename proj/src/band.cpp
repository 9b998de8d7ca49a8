// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/band.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "sce/flops.hpp"

namespace sce {
namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

Index checked_width(std::size_t window) {
  constexpr auto kMax = static_cast<std::size_t>(std::numeric_limits<Index>::max());
  if (window > (kMax - 1) / 2) throw std::invalid_argument("band window too large for the index type");
  return static_cast<Index>(2 * window + 1);
}

// Rows above this many multiply-adds are split across threads.
constexpr Index kParallelThreshold = 1 << 15;

}  // namespace

template <typename T>
BandMatrix<T>::BandMatrix(Index rows, Index key_len, std::size_t window)
    : key_len_(key_len), window_(window) {
  require(rows >= 0 && key_len >= 0, "band dimensions must be non-negative");
  const Index width = checked_width(window);
  ticket_ = mem::ticket_for<T>(mem::Category::attention, rows * width);
  data_ = Matrix<T>::Zero(rows, width);
  valid_.resize(static_cast<std::size_t>(rows * width));
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < width; ++j) {
      const Index key = key_index(i, j);
      valid_[static_cast<std::size_t>(i * width + j)] = key >= 0 && key < key_len;
    }
  }
}

template <typename T>
Index BandMatrix<T>::first_valid(Index i) const {
  return std::max<Index>(0, static_cast<Index>(window_) - i);
}

template <typename T>
Index BandMatrix<T>::last_valid(Index i) const {
  return std::min<Index>(width() - 1, key_len_ - 1 - i + static_cast<Index>(window_));
}

template <typename T>
void BandMatrix<T>::set(Index i, Index j, T value) {
  require(i >= 0 && i < rows() && j >= 0 && j < width(), "band index out of range");
  require(valid(i, j), "write to an invalid band slot");
  data_(i, j) = value;
}

template <typename T>
void BandMatrix<T>::clear_invalid() {
  for (Index i = 0; i < rows(); ++i) {
    const Index lo = first_valid(i);
    const Index hi = last_valid(i);
    for (Index j = 0; j < width(); ++j) {
      if (j < lo || j > hi) data_(i, j) = T(0);
    }
  }
}

template <typename T>
Matrix<T> MaskedMatrix<T>::filled(T fill) const {
  Matrix<T> out = values;
  for (Index i = 0; i < rows(); ++i) {
    for (Index j = 0; j < cols(); ++j) {
      if (masked(i, j)) out(i, j) = fill;
    }
  }
  return out;
}

namespace detail {

template <typename T>
BandMatrix<T> band_qk(ConstRef<T> q, ConstRef<T> k, std::size_t w, KernelPath path) {
  require(q.cols() == k.cols(), "band_qk: Q and K must share the embedding dimension");
  BandMatrix<T> a(q.rows(), k.rows(), w);
  const Index s = q.rows();
  const Index width = a.width();
  const Index h = q.cols();
  auto& out = a.mutable_values();

  if (path == KernelPath::reference) {
    // Padding slots multiply against k = 0, as in the zero-padded formulation.
    std::uint64_t executed = 0;
    for (Index i = 0; i < s; ++i) {
      for (Index j = 0; j < width; ++j) {
        const Index key = a.key_index(i, j);
        const bool inside = key >= 0 && key < k.rows();
        T acc = T(0);
        for (Index l = 0; l < h; ++l) {
          acc += q(i, l) * (inside ? k(key, l) : T(0));
          ++executed;
        }
        out(i, j) = acc;
      }
    }
    flops::add(executed);
    return a;
  }

#pragma omp parallel for schedule(static) if (s * width * h > kParallelThreshold)
  for (Index i = 0; i < s; ++i) {
    const Index lo = a.first_valid(i);
    const Index hi = a.last_valid(i);
    if (hi < lo) continue;
    const Index n = hi - lo + 1;
    out.row(i).segment(lo, n).noalias() = q.row(i) * k.middleRows(a.key_index(i, lo), n).transpose();
  }
  return a;
}

template <typename T>
Matrix<T> band_pv(const BandMatrix<T>& p, ConstRef<T> v, KernelPath path) {
  if (v.rows() != p.key_len()) {
    throw std::invalid_argument("band_pv: V has " + std::to_string(v.rows()) + " rows but the band addresses " +
                                std::to_string(p.key_len()) + " keys");
  }
  const Index s = p.rows();
  const Index width = p.width();
  const Index h = v.cols();
  const auto& probs = p.values();
  Matrix<T> o = Matrix<T>::Zero(s, h);

  if (path == KernelPath::reference) {
    std::uint64_t executed = 0;
    for (Index i = 0; i < s; ++i) {
      for (Index l = 0; l < h; ++l) {
        T acc = T(0);
        for (Index j = 0; j < width; ++j) {
          const Index key = p.key_index(i, j);
          const bool inside = key >= 0 && key < v.rows();
          acc += probs(i, j) * (inside ? v(key, l) : T(0));
          ++executed;
        }
        o(i, l) = acc;
      }
    }
    flops::add(executed);
    return o;
  }

#pragma omp parallel for schedule(static) if (s * width * h > kParallelThreshold)
  for (Index i = 0; i < s; ++i) {
    const Index lo = p.first_valid(i);
    const Index hi = p.last_valid(i);
    if (hi < lo) continue;
    const Index n = hi - lo + 1;
    o.row(i).noalias() = probs.row(i).segment(lo, n) * v.middleRows(p.key_index(i, lo), n);
  }
  return o;
}

template <typename T>
QkGradients<T> band_qk_backward(const BandMatrix<T>& grad_a, ConstRef<T> q, ConstRef<T> k, std::size_t w) {
  require(grad_a.window() == w, "band_qk_backward: window differs from the gradient band");
  require(q.cols() == k.cols(), "band_qk_backward: Q and K must share the embedding dimension");
  require(grad_a.rows() == q.rows() && grad_a.key_len() == k.rows(), "band_qk_backward: shape mismatch");

  const Index s = q.rows();
  const Index width = grad_a.width();
  const auto& g = grad_a.values();
  QkGradients<T> grads{Matrix<T>::Zero(q.rows(), q.cols()), Matrix<T>::Zero(k.rows(), k.cols())};

  for (Index i = 0; i < s; ++i) {
    const Index lo = grad_a.first_valid(i);
    const Index hi = grad_a.last_valid(i);
    if (hi < lo) continue;
    const Index n = hi - lo + 1;
    grads.q.row(i).noalias() = g.row(i).segment(lo, n) * k.middleRows(grad_a.key_index(i, lo), n);
  }
  // Gather per key row: key r is slot j = r - i + w of rows i in [r-w, r+w].
  const auto wi = static_cast<Index>(w);
  for (Index r = 0; r < k.rows(); ++r) {
    const Index i_lo = std::max<Index>(0, r - wi);
    const Index i_hi = std::min<Index>(s - 1, r + wi);
    for (Index i = i_lo; i <= i_hi; ++i) {
      const Index j = r - i + wi;
      if (j < 0 || j >= width) continue;
      grads.k.row(r) += g(i, j) * q.row(i);
    }
  }
  return grads;
}

template <typename T>
PvGradients<T> band_pv_backward(ConstRef<T> grad_o, const BandMatrix<T>& p, ConstRef<T> v) {
  require(v.rows() == p.key_len(), "band_pv_backward: V rows differ from the band key length");
  require(grad_o.rows() == p.rows() && grad_o.cols() == v.cols(), "band_pv_backward: shape mismatch");

  const Index s = p.rows();
  const Index width = p.width();
  const auto& probs = p.values();
  PvGradients<T> grads{BandMatrix<T>(p.rows(), p.key_len(), p.window()), Matrix<T>::Zero(v.rows(), v.cols())};
  auto& gp = grads.p.mutable_values();

  for (Index i = 0; i < s; ++i) {
    const Index lo = p.first_valid(i);
    const Index hi = p.last_valid(i);
    if (hi < lo) continue;
    const Index n = hi - lo + 1;
    gp.row(i).segment(lo, n).noalias() = grad_o.row(i) * v.middleRows(p.key_index(i, lo), n).transpose();
  }
  const auto wi = static_cast<Index>(p.window());
  for (Index r = 0; r < v.rows(); ++r) {
    const Index i_lo = std::max<Index>(0, r - wi);
    const Index i_hi = std::min<Index>(s - 1, r + wi);
    for (Index i = i_lo; i <= i_hi; ++i) {
      const Index j = r - i + wi;
      if (j < 0 || j >= width) continue;
      grads.v.row(r) += probs(i, j) * grad_o.row(i);
    }
  }
  return grads;
}

template <typename T>
MaskedMatrix<T> dense_band_oracle(ConstRef<T> q, ConstRef<T> k, std::size_t w) {
  require(q.cols() == k.cols(), "dense_band_oracle: Q and K must share the embedding dimension");
  checked_width(w);
  MaskedMatrix<T> out;
  out.values = q * k.transpose();
  out.in_band.resize(static_cast<std::size_t>(out.values.size()));
  const auto wi = static_cast<long double>(w);
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) {
      const bool inside = std::abs(static_cast<long double>(j - i)) <= wi;
      out.in_band[static_cast<std::size_t>(i * out.cols() + j)] = inside;
      if (!inside) out.values(i, j) = std::numeric_limits<T>::quiet_NaN();
    }
  }
  return out;
}

template <typename T>
BandMatrix<T> dense_to_band(ConstRef<T> dense, std::size_t w) {
  BandMatrix<T> band(dense.rows(), dense.cols(), w);
  auto& out = band.mutable_values();
  for (Index i = 0; i < band.rows(); ++i) {
    for (Index j = band.first_valid(i); j <= band.last_valid(i); ++j) out(i, j) = dense(i, band.key_index(i, j));
  }
  return band;
}

}  // namespace detail

template <typename T>
Matrix<T> band_to_dense(const BandMatrix<T>& band, Index target_cols, T fill) {
  if (target_cols < 1) throw std::invalid_argument("band_to_dense: target_cols must be positive");
  Matrix<T> out = Matrix<T>::Constant(band.rows(), target_cols, fill);
  for (Index i = 0; i < band.rows(); ++i) {
    for (Index j = band.first_valid(i); j <= band.last_valid(i); ++j) {
      const Index col = band.key_index(i, j);
      if (col < target_cols) out(i, col) = band(i, j);
    }
  }
  return out;
}

template <typename T>
MaskedMatrix<T> band_to_masked(const BandMatrix<T>& band, Index target_cols) {
  MaskedMatrix<T> out;
  out.values = band_to_dense(band, target_cols, std::numeric_limits<T>::quiet_NaN());
  out.in_band.resize(static_cast<std::size_t>(out.values.size()));
  for (Index i = 0; i < band.rows(); ++i) {
    for (Index j = band.first_valid(i); j <= band.last_valid(i); ++j) {
      const Index col = band.key_index(i, j);
      if (col < target_cols) out.in_band[static_cast<std::size_t>(i * target_cols + col)] = true;
    }
  }
  return out;
}

#define SCE_INSTANTIATE(T)                                                                                  \
  template class BandMatrix<T>;                                                                            \
  template struct MaskedMatrix<T>;                                                                         \
  template BandMatrix<T> detail::band_qk<T>(ConstRef<T>, ConstRef<T>, std::size_t, KernelPath);            \
  template Matrix<T> detail::band_pv<T>(const BandMatrix<T>&, ConstRef<T>, KernelPath);                    \
  template QkGradients<T> detail::band_qk_backward<T>(const BandMatrix<T>&, ConstRef<T>, ConstRef<T>,      \
                                                      std::size_t);                                        \
  template PvGradients<T> detail::band_pv_backward<T>(ConstRef<T>, const BandMatrix<T>&, ConstRef<T>);     \
  template MaskedMatrix<T> detail::dense_band_oracle<T>(ConstRef<T>, ConstRef<T>, std::size_t);            \
  template BandMatrix<T> detail::dense_to_band<T>(ConstRef<T>, std::size_t);                               \
  template Matrix<T> band_to_dense<T>(const BandMatrix<T>&, Index, T);                                     \
  template MaskedMatrix<T> band_to_masked<T>(const BandMatrix<T>&, Index);

SCE_INSTANTIATE(float)
SCE_INSTANTIATE(double)

#undef SCE_INSTANTIATE

}  // namespace sce
