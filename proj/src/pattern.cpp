// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/pattern.hpp"

#include <algorithm>
#include <sstream>

namespace sce {

std::string_view to_string(Group g) {
  switch (g) {
    case Group::cls: return "cls";
    case Group::query: return "query";
    case Group::document: return "document";
  }
  return "?";
}

const TokenRange& SubsequencePartition::range(Group g) const {
  switch (g) {
    case Group::cls: return cls;
    case Group::query: return query;
    case Group::document: return document;
  }
  throw std::invalid_argument("unknown group");
}

SubsequencePartition SubsequencePartition::for_lengths(Index query_tokens, Index document_tokens) {
  if (query_tokens < 1 || document_tokens < 0) throw std::invalid_argument("partition: invalid lengths");
  return {{0, 1}, {1, query_tokens + 1}, {query_tokens + 2, document_tokens + 1}};
}

void SubsequencePartition::validate() const {
  if (cls.begin != 0 || cls.size != 1) throw std::invalid_argument("partition: [CLS] must be the single first token");
  if (query.begin != cls.end() || query.size < 1) throw std::invalid_argument("partition: bad query range");
  if (document.begin != query.end() || document.size < 1) throw std::invalid_argument("partition: bad document range");
}

std::string_view to_string(PatternKind k) {
  switch (k) {
    case PatternKind::full: return "full";
    case PatternKind::longformer: return "longformer";
    case PatternKind::qds: return "qds";
    case PatternKind::sparse: return "sparse";
    case PatternKind::custom: return "custom";
  }
  return "?";
}

PatternKind parse_pattern_kind(std::string_view text) {
  for (auto k : {PatternKind::full, PatternKind::longformer, PatternKind::qds, PatternKind::sparse}) {
    if (text == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown attention pattern: " + std::string(text));
}

namespace {
const Window kInf = Window::infinite();
}

AttentionPattern AttentionPattern::full() {
  AttentionPattern p;
  for (auto g : kGroups) p.targets(g) = {{Group::cls, kInf}, {Group::query, kInf}, {Group::document, kInf}};
  p.kind_ = PatternKind::full;
  return p;
}

AttentionPattern AttentionPattern::longformer(Window w) {
  AttentionPattern p = full();
  p.targets(Group::document) = {{Group::cls, kInf}, {Group::query, kInf}, {Group::document, w}};
  p.kind_ = PatternKind::longformer;
  p.window_ = w;
  return p;
}

AttentionPattern AttentionPattern::qds(Window w, std::size_t every) {
  AttentionPattern p = longformer(w);
  p.kind_ = PatternKind::qds;
  p.global_every_ = every;
  return p;
}

AttentionPattern AttentionPattern::sparse(Window w) {
  AttentionPattern p = longformer(w);
  p.targets(Group::query) = {{Group::query, kInf}};
  p.kind_ = PatternKind::sparse;
  return p;
}

AttentionPattern AttentionPattern::make(PatternKind kind, Window w) {
  switch (kind) {
    case PatternKind::full: return full();
    case PatternKind::longformer: return longformer(w);
    case PatternKind::qds: return qds(w);
    case PatternKind::sparse: return sparse(w);
    case PatternKind::custom: break;
  }
  throw std::invalid_argument("cannot build a custom pattern by kind");
}

std::vector<Index> AttentionPattern::globals_for(Index document_tokens) const {
  std::vector<Index> out;
  if (global_every_ > 0) {
    const auto every = static_cast<Index>(global_every_);
    for (Index p = every - 1; p < document_tokens; p += every) out.push_back(p);
  }
  for (Index p : global_positions_) {
    if (p < 0 || p >= document_tokens) throw std::invalid_argument("global position outside the document");
    out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

bool AttentionPattern::targets_group(Group source, Group target) const {
  const auto& list = targets(source);
  return std::any_of(list.begin(), list.end(), [&](const AttentionTarget& t) { return t.group == target; });
}

void AttentionPattern::validate() const {
  for (auto g : kGroups) {
    const auto& list = targets(g);
    if (list.empty()) throw std::invalid_argument("pattern: group " + std::string(to_string(g)) + " has no targets");
    for (std::size_t a = 0; a < list.size(); ++a)
      for (std::size_t b = a + 1; b < list.size(); ++b)
        if (list[a].group == list[b].group)
          throw std::invalid_argument("pattern: duplicate target in group " + std::string(to_string(g)));
  }
}

std::string AttentionPattern::describe() const {
  std::ostringstream out;
  out << to_string(kind_);
  if (kind_ != PatternKind::full) out << "(w=" << window_.to_string() << ")";
  return out.str();
}

AttentionPlan AttentionPlan::build(const SubsequencePartition& partition, const AttentionPattern& pattern) {
  partition.validate();
  pattern.validate();
  AttentionPlan plan;
  plan.partition = partition;
  plan.globals = pattern.globals_for(partition.document.size - 1);
  plan.global_key_mask.assign(static_cast<std::size_t>(partition.document.size), false);
  for (Index g : plan.globals) plan.global_key_mask[static_cast<std::size_t>(g)] = true;
  const bool has_globals = !plan.globals.empty();

  for (auto source : kGroups) {
    Call call{source, false, {}};
    for (const auto& t : pattern.targets(source)) {
      if (t.group == Group::document && has_globals && !t.window.is_infinite()) {
        call.targets.push_back({Group::document, t.window, true, false});
        call.targets.push_back({Group::document, Window::infinite(), false, true});
      } else {
        call.targets.push_back({t.group, t.window, false, false});
      }
    }
    plan.calls.push_back(std::move(call));
  }
  if (has_globals) {
    Call global{Group::document, true, {}};
    for (auto target : kGroups) global.targets.push_back({target, Window::infinite(), false, false});
    plan.calls.push_back(std::move(global));
  }
  return plan;
}

namespace {

template <typename T>
Matrix<T> gather_rows(ConstRef<T> m, Index offset, const std::vector<Index>& rows) {
  Matrix<T> out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(offset + rows[i]);
  return out;
}

// Key/value views for one call, owning any gathered rows.
template <typename T>
struct CallInputs {
  std::vector<Matrix<T>> gathered;
  std::vector<KeyValue<T>> kv;
};

template <typename T>
CallInputs<T> call_inputs(const AttentionPlan& plan, const AttentionPlan::Call& call, ConstRef<T> k, ConstRef<T> v) {
  CallInputs<T> in;
  in.gathered.reserve(2 * call.targets.size());
  for (const auto& t : call.targets) {
    if (t.globals_only) {
      in.gathered.push_back(gather_rows<T>(k, plan.partition.document.begin, plan.globals));
      in.gathered.push_back(gather_rows<T>(v, plan.partition.document.begin, plan.globals));
      const auto& gk = in.gathered[in.gathered.size() - 2];
      const auto& gv = in.gathered.back();
      in.kv.push_back({view_of(gk), view_of(gv), t.window, nullptr});
    } else {
      const auto& r = plan.partition.range(t.group);
      in.kv.push_back({MatrixView<T>(k.data() + r.begin * k.outerStride(), r.size, k.cols(),
                                     Eigen::OuterStride<>(k.outerStride())),
                       MatrixView<T>(v.data() + r.begin * v.outerStride(), r.size, v.cols(),
                                     Eigen::OuterStride<>(v.outerStride())),
                       t.window, t.exclude_globals ? &plan.global_key_mask : nullptr});
    }
  }
  return in;
}

}  // namespace

template <typename T>
Matrix<T> attend_head(const AttentionPlan& plan, ConstRef<T> q, ConstRef<T> k, ConstRef<T> v,
                      const AttentionOptions& options, HeadAttentionCache<T>* cache) {
  Matrix<T> out(q.rows(), v.cols());
  if (cache) {
    cache->probs.clear();
    cache->probs.reserve(plan.calls.size());
  }
  const Index doc_begin = plan.partition.document.begin;
  for (const auto& call : plan.calls) {
    const auto in = call_inputs<T>(plan, call, k, v);
    if (call.global_rows) {
      const Matrix<T> q_src = gather_rows<T>(q, doc_begin, plan.globals);
      auto result = windowed_cross_attention_forward<T>(q_src, in.kv, options);
      for (std::size_t i = 0; i < plan.globals.size(); ++i)
        out.row(doc_begin + plan.globals[i]) = result.output.row(static_cast<Index>(i));
      if (cache) cache->probs.push_back(std::move(result.probs));
    } else {
      const auto& r = plan.partition.range(call.source);
      auto result = windowed_cross_attention_forward<T>(q.middleRows(r.begin, r.size), in.kv, options);
      out.middleRows(r.begin, r.size) = result.output;
      if (cache) cache->probs.push_back(std::move(result.probs));
    }
  }
  return out;
}

template <typename T>
HeadGradients<T> attend_head_backward(const AttentionPlan& plan, ConstRef<T> q, ConstRef<T> k, ConstRef<T> v,
                                      const HeadAttentionCache<T>& cache, ConstRef<T> grad_out,
                                      const AttentionOptions& options) {
  if (cache.probs.size() != plan.calls.size()) throw std::invalid_argument("attention backward: cache does not match plan");
  HeadGradients<T> grads{Matrix<T>::Zero(q.rows(), q.cols()), Matrix<T>::Zero(k.rows(), k.cols()),
                         Matrix<T>::Zero(v.rows(), v.cols())};
  const Index doc_begin = plan.partition.document.begin;
  const bool overwritten = !plan.globals.empty();

  for (std::size_t c = 0; c < plan.calls.size(); ++c) {
    const auto& call = plan.calls[c];
    const auto in = call_inputs<T>(plan, call, k, v);
    CrossAttentionGradients<T> g;
    if (call.global_rows) {
      const Matrix<T> q_src = gather_rows<T>(q, doc_begin, plan.globals);
      const Matrix<T> g_src = gather_rows<T>(grad_out, doc_begin, plan.globals);
      g = windowed_cross_attention_backward<T>(g_src, q_src, in.kv, cache.probs[c], options);
      for (std::size_t i = 0; i < plan.globals.size(); ++i)
        grads.q.row(doc_begin + plan.globals[i]) += g.q.row(static_cast<Index>(i));
    } else {
      const auto& r = plan.partition.range(call.source);
      Matrix<T> g_src = grad_out.middleRows(r.begin, r.size);
      // Global document rows were replaced by the global call's output.
      if (overwritten && call.source == Group::document) {
        for (Index gidx : plan.globals) g_src.row(gidx).setZero();
      }
      g = windowed_cross_attention_backward<T>(g_src, q.middleRows(r.begin, r.size), in.kv, cache.probs[c], options);
      grads.q.middleRows(r.begin, r.size) += g.q;
    }
    for (std::size_t t = 0; t < call.targets.size(); ++t) {
      const auto& target = call.targets[t];
      if (target.globals_only) {
        for (std::size_t i = 0; i < plan.globals.size(); ++i) {
          grads.k.row(doc_begin + plan.globals[i]) += g.k[t].row(static_cast<Index>(i));
          grads.v.row(doc_begin + plan.globals[i]) += g.v[t].row(static_cast<Index>(i));
        }
      } else {
        const auto& r = plan.partition.range(target.group);
        grads.k.middleRows(r.begin, r.size) += g.k[t];
        grads.v.middleRows(r.begin, r.size) += g.v[t];
      }
    }
  }
  return grads;
}

template <typename T>
Matrix<T> GroupOutputs<T>::stacked() const {
  Matrix<T> out(cls.rows() + query.rows() + document.rows(), cls.cols());
  out << cls, query, document;
  return out;
}

#define SCE_INSTANTIATE(T)                                                                                           \
  template struct GroupOutputs<T>;                                                                                  \
  template Matrix<T> attend_head<T>(const AttentionPlan&, ConstRef<T>, ConstRef<T>, ConstRef<T>,                    \
                                    const AttentionOptions&, HeadAttentionCache<T>*);                               \
  template HeadGradients<T> attend_head_backward<T>(const AttentionPlan&, ConstRef<T>, ConstRef<T>, ConstRef<T>,    \
                                                    const HeadAttentionCache<T>&, ConstRef<T>, const AttentionOptions&);

SCE_INSTANTIATE(float)
SCE_INSTANTIATE(double)

#undef SCE_INSTANTIATE

}  // namespace sce
