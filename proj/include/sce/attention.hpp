// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <variant>
#include <vector>

#include "sce/band.hpp"
#include "sce/memory.hpp"
#include "sce/types.hpp"

namespace sce {

// How band slots that fall outside the key sequence enter the softmax.
enum class PaddingMode {
  // Excluded: probability exactly 0, equivalent to a -inf additive mask.
  exclude,
  // Literal zero-padding (k = v = 0): the slot contributes a logit of 0 to the
  // normalizer and nothing to the output.
  zero_logit,
};

PaddingMode parse_padding_mode(std::string_view text);
std::string_view to_string(PaddingMode mode);

/// Dense score block for an unwindowed target, charged to the attention ledger.
template <typename T>
struct DenseScores {
  DenseScores(Index rows, Index cols)
      : ticket(mem::ticket_for<T>(mem::Category::attention, rows * cols)), values(rows, cols) {}

  mem::Ticket ticket;
  Matrix<T> values;
};

template <typename T>
struct ScoreSegment {
  std::variant<DenseScores<T>, BandMatrix<T>> block;
  // Keys excluded for every row (size key_len), or empty.
  std::vector<bool> key_excluded;

  bool is_band() const { return std::holds_alternative<BandMatrix<T>>(block); }
  const BandMatrix<T>& band() const { return std::get<BandMatrix<T>>(block); }
  BandMatrix<T>& band() { return std::get<BandMatrix<T>>(block); }
  const Matrix<T>& dense() const { return std::get<DenseScores<T>>(block).values; }
  Matrix<T>& dense() { return std::get<DenseScores<T>>(block).values; }

  Index rows() const;
  Index key_len() const;
  bool excluded(Index key) const { return !key_excluded.empty() && key_excluded[static_cast<std::size_t>(key)]; }
};

/// Scores (or probabilities) of one source block against an ordered tuple of
/// targets. Every segment has the same row count.
template <typename T>
struct SegmentScores {
  std::vector<ScoreSegment<T>> segments;

  Index rows() const { return segments.empty() ? 0 : segments.front().rows(); }
};

/// Softmax over the concatenation of all segments of each row, after dividing
/// the logits by `scale`. Invalid band slots and excluded keys get probability
/// 0. Throws if a row has nothing to attend to.
template <typename T>
SegmentScores<T> segment_softmax(SegmentScores<T> scores, T scale, PaddingMode padding = PaddingMode::exclude);

/// Gradient of the logits given the gradient of the probabilities; both use
/// the layout of `probs`. Includes the 1/scale factor.
template <typename T>
SegmentScores<T> segment_softmax_backward(const SegmentScores<T>& probs, const SegmentScores<T>& grad_probs, T scale);

/// One attended-to target of a windowed cross-attention call.
template <typename T>
struct KeyValue {
  MatrixView<T> keys;
  MatrixView<T> values;
  Window window;
  const std::vector<bool>* key_excluded = nullptr;
};

template <typename T, typename DK, typename DV>
KeyValue<T> key_value(const Eigen::MatrixBase<DK>& k, const Eigen::MatrixBase<DV>& v, Window w,
                      const std::vector<bool>* excluded = nullptr) {
  return KeyValue<T>{view_of(k), view_of(v), w, excluded};
}

struct AttentionOptions {
  // Logit divisor; 0 selects sqrt of the query width.
  double scale = 0.0;
  PaddingMode padding = PaddingMode::exclude;
  KernelPath kernel = KernelPath::blocked;
};

template <typename T>
struct CrossAttentionResult {
  Matrix<T> output;
  SegmentScores<T> probs;
};

/// O = sum_i P_i (.)w_i V_i with [P_1..P_j] the joint softmax of
/// [Q (box)w_1 K_1, ..., Q (box)w_j K_j] / scale.
template <typename T>
CrossAttentionResult<T> windowed_cross_attention_forward(ConstRef<T> q, std::span<const KeyValue<T>> kv,
                                                         const AttentionOptions& options = {});

template <typename T>
Matrix<T> windowed_cross_attention(ConstRef<T> q, std::span<const KeyValue<T>> kv, const AttentionOptions& options = {}) {
  return windowed_cross_attention_forward<T>(q, kv, options).output;
}

template <typename T>
struct CrossAttentionGradients {
  Matrix<T> q;
  std::vector<Matrix<T>> k;
  std::vector<Matrix<T>> v;
};

template <typename T>
CrossAttentionGradients<T> windowed_cross_attention_backward(ConstRef<T> grad_out, ConstRef<T> q,
                                                             std::span<const KeyValue<T>> kv,
                                                             const SegmentScores<T>& probs,
                                                             const AttentionOptions& options = {});

/// Plain scaled dot-product attention softmax(Q K^T / sqrt(h)) V.
template <typename DQ, typename DK, typename DV>
Matrix<typename DQ::Scalar> full_attention(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                                           const Eigen::MatrixBase<DV>& v) {
  using T = typename DQ::Scalar;
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw std::invalid_argument("full_attention: dimension mismatch");
  Matrix<T> logits = (q * k.transpose()) / std::sqrt(static_cast<T>(q.cols()));
  for (Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    row = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return logits * v;
}

}  // namespace sce
