// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sce {

using Index = Eigen::Index;

// All dense storage is row-major so that token rows are contiguous.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Read-only view accepting whole matrices and row/column blocks of them
// (head slices are column blocks with an outer stride of the model width).
template <typename T>
using ConstRef = Eigen::Ref<const Matrix<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using MutRef = Eigen::Ref<Matrix<T>, 0, Eigen::OuterStride<>>;

// Non-owning strided view that can be stored in aggregates.
template <typename T>
using MatrixView = Eigen::Map<const Matrix<T>, 0, Eigen::OuterStride<>>;

template <typename Derived>
MatrixView<typename Derived::Scalar> view_of(const Eigen::MatrixBase<Derived>& m) {
  static_assert(Derived::IsRowMajor || Derived::ColsAtCompileTime == 1,
                "views require row-major storage");
  return {m.derived().data(), m.rows(), m.cols(), Eigen::OuterStride<>(m.derived().outerStride())};
}

// Attention window: number of neighbours on each side, or unbounded.
class Window {
 public:
  static constexpr Window infinite() { return Window(); }
  static constexpr Window of(std::size_t w) { return Window(w); }

  constexpr bool is_infinite() const { return infinite_; }
  constexpr std::size_t size() const { return size_; }

  // Width of a band row (2w+1); meaningless for infinite windows.
  constexpr std::size_t band_width() const { return 2 * size_ + 1; }

  friend constexpr bool operator==(Window a, Window b) {
    return a.infinite_ == b.infinite_ && (a.infinite_ || a.size_ == b.size_);
  }

  std::string to_string() const { return infinite_ ? "inf" : std::to_string(size_); }

  // Accepts a non-negative integer or "inf"/"infinite".
  static Window parse(std::string_view text);

 private:
  constexpr Window() : size_(0), infinite_(true) {}
  constexpr explicit Window(std::size_t w) : size_(w), infinite_(false) {}

  std::size_t size_;
  bool infinite_;
};

enum class Precision { f32, f64 };

Precision parse_precision(std::string_view text);
std::string_view to_string(Precision p);

// Raised when activations or losses stop being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sce
