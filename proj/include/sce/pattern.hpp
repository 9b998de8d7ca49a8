// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "sce/attention.hpp"
#include "sce/types.hpp"

namespace sce {

enum class Group : std::uint8_t { cls = 0, query = 1, document = 2 };
inline constexpr std::array<Group, 3> kGroups{Group::cls, Group::query, Group::document};

std::string_view to_string(Group g);

struct TokenRange {
  Index begin = 0;
  Index size = 0;
  Index end() const { return begin + size; }
};

/// Split of an assembled sequence into [CLS], query (+ its [SEP]) and
/// document (+ its [SEP]).
struct SubsequencePartition {
  TokenRange cls;
  TokenRange query;
  TokenRange document;

  const TokenRange& range(Group g) const;
  Index total() const { return document.end(); }

  // Partition of [CLS] q_1..q_m [SEP] d_1..d_n [SEP].
  static SubsequencePartition for_lengths(Index query_tokens, Index document_tokens);

  // Throws unless the ranges are contiguous, ordered and non-empty.
  void validate() const;
};

struct AttentionTarget {
  Group group;
  Window window;
};

enum class PatternKind { full, longformer, qds, sparse, custom };

std::string_view to_string(PatternKind k);
PatternKind parse_pattern_kind(std::string_view text);

/// Which groups each group attends to, and with which window.
///
/// Document positions marked global (every `global_every`-th document token,
/// plus `global_positions`) attend to every token and are attended by every
/// group that targets the document.
class AttentionPattern {
 public:
  AttentionPattern() = default;

  static AttentionPattern full();
  // [CLS] and query attend everywhere; document attends to [CLS], query and a
  // window of itself.
  static AttentionPattern longformer(Window w);
  // Longformer plus a global document token every `every`-th position.
  static AttentionPattern qds(Window w, std::size_t every = 30);
  // [CLS] attends everywhere, the query only to itself, the document to [CLS],
  // query and a window of itself.
  static AttentionPattern sparse(Window w);
  static AttentionPattern make(PatternKind kind, Window w);

  std::vector<AttentionTarget>& targets(Group g) { return targets_[static_cast<std::size_t>(g)]; }
  const std::vector<AttentionTarget>& targets(Group g) const { return targets_[static_cast<std::size_t>(g)]; }

  PatternKind kind() const { return kind_; }
  Window window() const { return window_; }
  std::size_t global_every() const { return global_every_; }

  void set_global_every(std::size_t every) { global_every_ = every; }
  std::vector<Index>& global_positions() { return global_positions_; }
  const std::vector<Index>& global_positions() const { return global_positions_; }

  // Sorted document-local indices of global tokens for a document of
  // `document_tokens` tokens (trailing [SEP] excluded).
  std::vector<Index> globals_for(Index document_tokens) const;

  bool targets_group(Group source, Group target) const;

  // Throws on duplicate targets or a group without targets.
  void validate() const;

  std::string describe() const;

 private:
  std::array<std::vector<AttentionTarget>, 3> targets_;
  PatternKind kind_ = PatternKind::custom;
  Window window_ = Window::infinite();
  std::size_t global_every_ = 0;
  std::vector<Index> global_positions_;
};

/// The pattern resolved against one partition: the list of cross-attention
/// calls a layer executes. Built once per sequence and reused by every layer
/// and head.
struct AttentionPlan {
  struct Target {
    Group group;
    Window window;
    bool exclude_globals = false;  // mask global document keys (seen via globals_only)
    bool globals_only = false;     // gather just the global document keys
  };
  struct Call {
    Group source;
    bool global_rows = false;  // source rows are the global document tokens
    std::vector<Target> targets;
  };

  SubsequencePartition partition;
  std::vector<Index> globals;         // document-local indices
  std::vector<bool> global_key_mask;  // size of the document group
  std::vector<Call> calls;

  static AttentionPlan build(const SubsequencePartition& partition, const AttentionPattern& pattern);
};

template <typename T>
struct HeadAttentionCache {
  std::vector<SegmentScores<T>> probs;  // one per plan call
};

/// Runs every call of the plan for one head. q, k, v are s x d over the whole
/// sequence; the result is s x d.
template <typename T>
Matrix<T> attend_head(const AttentionPlan& plan, ConstRef<T> q, ConstRef<T> k, ConstRef<T> v,
                      const AttentionOptions& options, HeadAttentionCache<T>* cache = nullptr);

template <typename T>
struct HeadGradients {
  Matrix<T> q, k, v;
};

template <typename T>
HeadGradients<T> attend_head_backward(const AttentionPlan& plan, ConstRef<T> q, ConstRef<T> k, ConstRef<T> v,
                                      const HeadAttentionCache<T>& cache, ConstRef<T> grad_out,
                                      const AttentionOptions& options);

template <typename T>
struct GroupOutputs {
  Matrix<T> cls, query, document;

  Matrix<T> stacked() const;
};

/// Applies the pattern to whole-sequence Q, K, V (single head) and returns
/// the per-group outputs.
template <typename DQ, typename DK, typename DV>
GroupOutputs<typename DQ::Scalar> apply_pattern(const SubsequencePartition& partition, const Eigen::MatrixBase<DQ>& q,
                                                const Eigen::MatrixBase<DK>& k, const Eigen::MatrixBase<DV>& v,
                                                const AttentionPattern& pattern, const AttentionOptions& options = {});

template <typename DQ, typename DK, typename DV>
GroupOutputs<typename DQ::Scalar> apply_pattern(const SubsequencePartition& partition, const Eigen::MatrixBase<DQ>& q,
                                                const Eigen::MatrixBase<DK>& k, const Eigen::MatrixBase<DV>& v,
                                                const AttentionPattern& pattern, const AttentionOptions& options) {
  using T = typename DQ::Scalar;
  partition.validate();
  if (q.rows() != partition.total() || k.rows() != partition.total() || v.rows() != partition.total())
    throw std::invalid_argument("apply_pattern: Q/K/V rows differ from the partition length");
  const auto plan = AttentionPlan::build(partition, pattern);
  const Matrix<T> out =
      attend_head<T>(plan, ConstRef<T>(q.derived()), ConstRef<T>(k.derived()), ConstRef<T>(v.derived()), options);
  return {out.middleRows(partition.cls.begin, partition.cls.size),
          out.middleRows(partition.query.begin, partition.query.size),
          out.middleRows(partition.document.begin, partition.document.size)};
}

}  // namespace sce
