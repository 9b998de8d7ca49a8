// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/attention.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "sce/flops.hpp"

namespace sce {
namespace {

// Visits every valid, non-excluded entry of row i of a segment as f(col, value&).
// For band segments col is the slot index.
template <typename T, typename Seg, typename F>
void for_each_live(Seg& seg, Index i, F&& f) {
  if (seg.is_band()) {
    auto& band = seg.band();
    auto& values = band.mutable_values();
    for (Index j = band.first_valid(i); j <= band.last_valid(i); ++j) {
      if (seg.excluded(band.key_index(i, j))) continue;
      f(j, values(i, j));
    }
  } else {
    auto& values = seg.dense();
    for (Index c = 0; c < values.cols(); ++c) {
      if (seg.excluded(c)) continue;
      f(c, values(i, c));
    }
  }
}

// Out-of-range band slots in row i that are not key-excluded (zero-logit padding).
template <typename T>
Index padding_slots(const ScoreSegment<T>& seg, Index i) {
  if (!seg.is_band()) return 0;
  const auto& band = seg.band();
  const Index lo = band.first_valid(i);
  const Index hi = band.last_valid(i);
  const Index live = hi >= lo ? hi - lo + 1 : 0;
  return band.width() - live;
}

template <typename T>
void zero_dead_entries(ScoreSegment<T>& seg) {
  if (seg.is_band()) {
    auto& band = seg.band();
    band.clear_invalid();
    if (seg.key_excluded.empty()) return;
    auto& values = band.mutable_values();
    for (Index i = 0; i < band.rows(); ++i)
      for (Index j = band.first_valid(i); j <= band.last_valid(i); ++j)
        if (seg.excluded(band.key_index(i, j))) values(i, j) = T(0);
  } else if (!seg.key_excluded.empty()) {
    auto& values = seg.dense();
    for (Index c = 0; c < values.cols(); ++c)
      if (seg.excluded(c)) values.col(c).setZero();
  }
}

template <typename T>
T resolve_scale(const AttentionOptions& options, Index width) {
  return options.scale > 0 ? static_cast<T>(options.scale) : std::sqrt(static_cast<T>(width));
}

}  // namespace

PaddingMode parse_padding_mode(std::string_view text) {
  if (text == "exclude") return PaddingMode::exclude;
  if (text == "zero-logit" || text == "zero_logit") return PaddingMode::zero_logit;
  throw std::invalid_argument("invalid padding mode: " + std::string(text));
}

std::string_view to_string(PaddingMode mode) { return mode == PaddingMode::exclude ? "exclude" : "zero-logit"; }

template <typename T>
Index ScoreSegment<T>::rows() const {
  return is_band() ? band().rows() : dense().rows();
}

template <typename T>
Index ScoreSegment<T>::key_len() const {
  return is_band() ? band().key_len() : dense().cols();
}

template <typename T>
SegmentScores<T> segment_softmax(SegmentScores<T> scores, T scale, PaddingMode padding) {
  if (!(scale > T(0))) throw std::invalid_argument("segment_softmax: scale must be positive");
  if (scores.segments.empty()) throw std::invalid_argument("segment_softmax: no segments");
  const Index rows = scores.rows();
  for (const auto& seg : scores.segments) {
    if (seg.rows() != rows) throw std::invalid_argument("segment_softmax: segments disagree on row count");
    if (!seg.key_excluded.empty() && static_cast<Index>(seg.key_excluded.size()) != seg.key_len())
      throw std::invalid_argument("segment_softmax: exclusion mask length differs from key length");
  }
  const T inv_scale = T(1) / scale;
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();

  for (Index i = 0; i < rows; ++i) {
    T row_max = kNegInf;
    Index live = 0;
    Index phantom = 0;
    for (auto& seg : scores.segments) {
      for_each_live<T>(seg, i, [&](Index, T& a) {
        row_max = std::max(row_max, a * inv_scale);
        ++live;
      });
      if (padding == PaddingMode::zero_logit) phantom += padding_slots(seg, i);
    }
    if (live == 0 && phantom == 0) {
      throw std::invalid_argument("segment_softmax: row " + std::to_string(i) + " has no valid entries");
    }
    if (phantom > 0) row_max = std::max(row_max, T(0));

    T denom = static_cast<T>(phantom) * std::exp(-row_max);
    for (auto& seg : scores.segments) {
      for_each_live<T>(seg, i, [&](Index, T& a) {
        a = std::exp(a * inv_scale - row_max);
        denom += a;
      });
    }
    const T inv = T(1) / denom;
    for (auto& seg : scores.segments) for_each_live<T>(seg, i, [&](Index, T& p) { p *= inv; });
  }
  for (auto& seg : scores.segments) zero_dead_entries(seg);
  return scores;
}

template <typename T>
SegmentScores<T> segment_softmax_backward(const SegmentScores<T>& probs, const SegmentScores<T>& grad_probs, T scale) {
  SegmentScores<T> grad = grad_probs;
  const Index rows = probs.rows();
  const T inv_scale = T(1) / scale;
  for (Index i = 0; i < rows; ++i) {
    T dot = T(0);
    for (std::size_t s = 0; s < probs.segments.size(); ++s) {
      const auto& p = probs.segments[s];
      auto& g = grad.segments[s];
      if (p.is_band()) {
        dot += p.band().values().row(i).dot(g.band().values().row(i));
      } else {
        dot += p.dense().row(i).dot(g.dense().row(i));
      }
    }
    for (std::size_t s = 0; s < probs.segments.size(); ++s) {
      const auto& p = probs.segments[s];
      auto& g = grad.segments[s];
      if (p.is_band()) {
        auto row = g.band().mutable_values().row(i);
        row = (p.band().values().row(i).array() * (row.array() - dot) * inv_scale).matrix();
      } else {
        auto row = g.dense().row(i);
        row = (p.dense().row(i).array() * (row.array() - dot) * inv_scale).matrix();
      }
    }
  }
  return grad;
}

template <typename T>
CrossAttentionResult<T> windowed_cross_attention_forward(ConstRef<T> q, std::span<const KeyValue<T>> kv,
                                                         const AttentionOptions& options) {
  if (kv.empty()) throw std::invalid_argument("windowed_cross_attention: empty key/value tuple");
  const Index h = q.cols();
  for (const auto& target : kv) {
    if (target.keys.cols() != h || target.values.cols() != h)
      throw std::invalid_argument("windowed_cross_attention: key/value width differs from the query width");
    if (target.keys.rows() != target.values.rows())
      throw std::invalid_argument("windowed_cross_attention: keys and values differ in length");
  }

  SegmentScores<T> scores;
  scores.segments.reserve(kv.size());
  for (const auto& target : kv) {
    std::vector<bool> excluded = target.key_excluded ? *target.key_excluded : std::vector<bool>{};
    if (target.window.is_infinite()) {
      DenseScores<T> dense(q.rows(), target.keys.rows());
      dense.values.noalias() = q * target.keys.transpose();
      flops::add_product(q.rows(), target.keys.rows(), h);
      scores.segments.push_back({std::move(dense), std::move(excluded)});
    } else {
      scores.segments.push_back(
          {detail::band_qk<T>(q, target.keys, target.window.size(), options.kernel), std::move(excluded)});
    }
  }

  CrossAttentionResult<T> result{Matrix<T>::Zero(q.rows(), h),
                                 segment_softmax(std::move(scores), resolve_scale<T>(options, h), options.padding)};
  for (std::size_t s = 0; s < kv.size(); ++s) {
    const auto& seg = result.probs.segments[s];
    if (seg.is_band()) {
      result.output += detail::band_pv<T>(seg.band(), kv[s].values, options.kernel);
    } else {
      result.output.noalias() += seg.dense() * kv[s].values;
      flops::add_product(q.rows(), h, kv[s].values.rows());
    }
  }
  return result;
}

template <typename T>
CrossAttentionGradients<T> windowed_cross_attention_backward(ConstRef<T> grad_out, ConstRef<T> q,
                                                             std::span<const KeyValue<T>> kv,
                                                             const SegmentScores<T>& probs,
                                                             const AttentionOptions& options) {
  if (probs.segments.size() != kv.size()) throw std::invalid_argument("attention backward: segment count mismatch");
  CrossAttentionGradients<T> grads;
  grads.q = Matrix<T>::Zero(q.rows(), q.cols());
  grads.k.reserve(kv.size());
  grads.v.reserve(kv.size());

  SegmentScores<T> grad_probs;
  grad_probs.segments.reserve(kv.size());
  for (std::size_t s = 0; s < kv.size(); ++s) {
    const auto& seg = probs.segments[s];
    if (seg.is_band()) {
      auto g = detail::band_pv_backward<T>(grad_out, seg.band(), kv[s].values);
      grads.v.push_back(std::move(g.v));
      grad_probs.segments.push_back({std::move(g.p), {}});
    } else {
      DenseScores<T> g(seg.dense().rows(), seg.dense().cols());
      g.values.noalias() = grad_out * kv[s].values.transpose();
      grads.v.push_back(seg.dense().transpose() * grad_out);
      grad_probs.segments.push_back({std::move(g), {}});
    }
  }

  const auto grad_logits = segment_softmax_backward(probs, grad_probs, resolve_scale<T>(options, q.cols()));
  for (std::size_t s = 0; s < kv.size(); ++s) {
    const auto& seg = grad_logits.segments[s];
    if (seg.is_band()) {
      auto g = detail::band_qk_backward<T>(seg.band(), q, kv[s].keys, seg.band().window());
      grads.q += g.q;
      grads.k.push_back(std::move(g.k));
    } else {
      grads.q.noalias() += seg.dense() * kv[s].keys;
      grads.k.push_back(seg.dense().transpose() * q);
    }
  }
  return grads;
}

#define SCE_INSTANTIATE(T)                                                                                       \
  template struct ScoreSegment<T>;                                                                              \
  template SegmentScores<T> segment_softmax<T>(SegmentScores<T>, T, PaddingMode);                               \
  template SegmentScores<T> segment_softmax_backward<T>(const SegmentScores<T>&, const SegmentScores<T>&, T);   \
  template CrossAttentionResult<T> windowed_cross_attention_forward<T>(ConstRef<T>, std::span<const KeyValue<T>>, \
                                                                       const AttentionOptions&);                \
  template CrossAttentionGradients<T> windowed_cross_attention_backward<T>(                                     \
      ConstRef<T>, ConstRef<T>, std::span<const KeyValue<T>>, const SegmentScores<T>&, const AttentionOptions&);

SCE_INSTANTIATE(float)
SCE_INSTANTIATE(double)

#undef SCE_INSTANTIATE

}  // namespace sce
