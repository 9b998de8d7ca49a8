// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace sce::train {

double margin_mse_loss(double s_pos, double s_neg, double t_pos, double t_neg) {
  const double diff = (s_pos - s_neg) - (t_pos - t_neg);
  return diff * diff;
}

double ranknet_loss(double s_pos, double s_neg) {
  const double margin = s_pos - s_neg;
  return std::max(-margin, 0.0) + std::log1p(std::exp(-std::abs(margin)));
}

std::string_view to_string(LossKind k) { return k == LossKind::ranknet ? "ranknet" : "margin-mse"; }

LossKind parse_loss_kind(std::string_view text) {
  if (text == "ranknet") return LossKind::ranknet;
  if (text == "margin-mse" || text == "margin_mse") return LossKind::margin_mse;
  throw std::invalid_argument("unknown loss: " + std::string(text));
}

PairLoss pair_loss(LossKind kind, const Triple& t, double s_pos, double s_neg) {
  PairLoss out;
  if (kind == LossKind::ranknet) {
    const double margin = s_pos - s_neg;
    out.loss = ranknet_loss(s_pos, s_neg);
    // d/dm log(1 + e^-m) = -sigmoid(-m)
    const double sig = margin >= 0 ? std::exp(-margin) / (1 + std::exp(-margin)) : 1 / (1 + std::exp(margin));
    out.d_positive = -sig;
    out.d_negative = sig;
  } else {
    if (!t.teacher_positive || !t.teacher_negative) throw std::invalid_argument("margin-mse needs teacher scores");
    out.loss = margin_mse_loss(s_pos, s_neg, *t.teacher_positive, *t.teacher_negative);
    const double diff = (s_pos - s_neg) - (*t.teacher_positive - *t.teacher_negative);
    out.d_positive = 2 * diff;
    out.d_negative = -2 * diff;
  }
  return out;
}

namespace {

TokenSequence pair_input(const Model<double>& model, std::span<const TokenId> query, std::span<const TokenId> doc) {
  return assemble_input(query, doc, model.config.max_positions);
}

}  // namespace

double batch_loss(const Model<double>& model, std::span<const Triple> batch, LossKind kind) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  double total = 0;
  for (const auto& t : batch) {
    const double sp = score_sequence(pair_input(model, t.query, t.positive), model);
    const double sn = score_sequence(pair_input(model, t.query, t.negative), model);
    total += pair_loss(kind, t, sp, sn).loss;
  }
  return total / static_cast<double>(batch.size());
}

BatchGradient batch_gradient(const Model<double>& model, std::span<const Triple> batch, LossKind kind) {
  if (batch.empty()) throw std::invalid_argument("batch_gradient: empty batch");
  BatchGradient out{0.0, model.weights.zeros_like()};
  const double inv = 1.0 / static_cast<double>(batch.size());
  ForwardCache<double> pos_cache, neg_cache;
  for (const auto& t : batch) {
    const auto& w = model.weights;
    const auto pos = encoder_forward(pair_input(model, t.query, t.positive), model.config, w, {}, &pos_cache);
    const auto neg = encoder_forward(pair_input(model, t.query, t.negative), model.config, w, {}, &neg_cache);
    const double sp = relevance_score<double>(pos, w.head_weight, w.head_bias);
    const double sn = relevance_score<double>(neg, w.head_weight, w.head_bias);
    const auto l = pair_loss(kind, t, sp, sn);
    out.loss += l.loss * inv;
    score_backward(pos_cache, model.config, w, l.d_positive * inv, out.grads);
    score_backward(neg_cache, model.config, w, l.d_negative * inv, out.grads);
  }
  return out;
}

GradCheckReport grad_check(Model<double>& model, std::span<const Triple> batch, LossKind kind, double eps,
                           std::size_t samples, std::uint64_t seed, double floor) {
  auto analytic = batch_gradient(model, batch, kind);
  if (!std::isfinite(analytic.loss)) throw NumericalError("grad_check: loss is not finite");

  struct Slot {
    std::string name;
    Matrix<double>* param;
    const Matrix<double>* grad;
  };
  std::vector<Slot> slots;
  model.weights.visit([&](const std::string& name, Matrix<double>& m) { slots.push_back({name, &m, nullptr}); });
  std::size_t i = 0;
  analytic.grads.visit([&](const std::string&, const Matrix<double>& g) { slots[i++].grad = &g; });

  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::size_t, Index>> picks;
  for (std::size_t s = 0; s < slots.size(); ++s)
    if (slots[s].param->size() > 0)
      picks.emplace_back(s, std::uniform_int_distribution<Index>(0, slots[s].param->size() - 1)(rng));
  std::vector<Index> offsets{0};
  for (const auto& s : slots) offsets.push_back(offsets.back() + s.param->size());
  std::uniform_int_distribution<Index> flat(0, offsets.back() - 1);
  while (picks.size() < samples) {
    const Index f = flat(rng);
    const auto s = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), f) - offsets.begin() - 1);
    picks.emplace_back(s, f - offsets[s]);
  }

  GradCheckReport report;
  for (const auto& [s, idx] : picks) {
    double& x = slots[s].param->data()[idx];
    const double saved = x;
    x = saved + eps;
    const double plus = batch_loss(model, batch, kind);
    x = saved - eps;
    const double minus = batch_loss(model, batch, kind);
    x = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) throw NumericalError("grad_check: loss is not finite");
    const double numeric = (plus - minus) / (2 * eps);
    const double a = slots[s].grad->data()[idx];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (report.worst_tensor.empty() || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_tensor = slots[s].name;
    }
    ++report.checked;
  }
  return report;
}

void AdamW::step(EncoderWeights<double>& weights, const EncoderWeights<double>& grads, double lr) {
  if (!m_) {
    m_ = weights.zeros_like();
    v_ = weights.zeros_like();
  }
  ++t_;
  const double c1 = 1 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(options_.beta2, static_cast<double>(t_));

  std::vector<const Matrix<double>*> g;
  std::vector<Matrix<double>*> m, v;
  grads.visit([&](const std::string&, const Matrix<double>& x) { g.push_back(&x); });
  m_->visit([&](const std::string&, Matrix<double>& x) { m.push_back(&x); });
  v_->visit([&](const std::string&, Matrix<double>& x) { v.push_back(&x); });
  std::size_t i = 0;
  weights.visit([&](const std::string& name, Matrix<double>& w) {
    if (i >= g.size() || g[i]->size() != w.size()) throw std::invalid_argument("AdamW: gradient shape mismatch at " + name);
    auto& mi = *m[i];
    auto& vi = *v[i];
    const auto& gi = *g[i];
    mi = options_.beta1 * mi + (1 - options_.beta1) * gi;
    vi = options_.beta2 * vi + (1 - options_.beta2) * gi.cwiseProduct(gi);
    const Matrix<double> update =
        (mi.array() / c1) / ((vi.array() / c2).sqrt() + options_.eps) + options_.weight_decay * w.array();
    w -= lr * update;
    ++i;
  });
}

std::vector<TokenId> SyntheticTask::sample_query(std::mt19937_64& rng) const {
  if (query_terms < 1 || query_terms > vocab_terms) throw std::invalid_argument("task: bad query_terms");
  std::vector<TokenId> terms(vocab_terms);
  std::iota(terms.begin(), terms.end(), TokenId{3});
  std::vector<TokenId> out;
  std::sample(terms.begin(), terms.end(), std::back_inserter(out), static_cast<std::ptrdiff_t>(query_terms), rng);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<TokenId> SyntheticTask::sample_document(std::span<const TokenId> query, std::size_t overlap,
                                                    std::mt19937_64& rng) const {
  if (overlap > query.size() || overlap > doc_len) throw std::invalid_argument("task: overlap too large");
  std::vector<TokenId> distractors;
  for (std::size_t t = 0; t < vocab_terms; ++t) {
    const auto id = static_cast<TokenId>(t + 3);
    if (std::find(query.begin(), query.end(), id) == query.end()) distractors.push_back(id);
  }
  if (distractors.empty()) throw std::invalid_argument("task: no distractor terms left");
  std::vector<TokenId> doc;
  std::sample(query.begin(), query.end(), std::back_inserter(doc), static_cast<std::ptrdiff_t>(overlap), rng);
  std::uniform_int_distribution<std::size_t> pick(0, distractors.size() - 1);
  while (doc.size() < doc_len) doc.push_back(distractors[pick(rng)]);
  std::shuffle(doc.begin(), doc.end(), rng);
  return doc;
}

Triple SyntheticTask::sample_triple(std::mt19937_64& rng) const {
  Triple t;
  t.query = sample_query(rng);
  std::size_t pos = query_terms, neg = 0;
  if (graded_fraction > 0 && std::uniform_real_distribution<double>(0, 1)(rng) < graded_fraction) {
    pos = std::uniform_int_distribution<std::size_t>(1, query_terms)(rng);
    neg = std::uniform_int_distribution<std::size_t>(0, pos - 1)(rng);
  }
  t.positive = sample_document(t.query, pos, rng);
  t.negative = sample_document(t.query, neg, rng);
  t.teacher_positive = static_cast<double>(pos);
  t.teacher_negative = static_cast<double>(neg);
  return t;
}

std::vector<SyntheticTask::ValidationQuery> SyntheticTask::validation_set(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<ValidationQuery> out;
  out.reserve(validation_queries);
  for (std::size_t q = 0; q < validation_queries; ++q) {
    ValidationQuery v;
    v.id = "q" + std::to_string(q);
    v.query = sample_query(rng);
    std::vector<std::size_t> overlaps(candidates);
    for (std::size_t c = 0; c < candidates; ++c) overlaps[c] = c % (query_terms + 1);
    std::shuffle(overlaps.begin(), overlaps.end(), rng);
    for (std::size_t c = 0; c < candidates; ++c) {
      v.candidates.push_back({v.id + "-d" + std::to_string(c), sample_document(v.query, overlaps[c], rng)});
      v.grades.push_back(static_cast<int>(overlaps[c]));
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::size_t SyntheticTask::overlap(std::span<const TokenId> query, std::span<const TokenId> doc) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < query.size(); ++i) {
    if (std::find(query.begin(), query.begin() + static_cast<std::ptrdiff_t>(i), query[i]) !=
        query.begin() + static_cast<std::ptrdiff_t>(i))
      continue;
    if (std::find(doc.begin(), doc.end(), query[i]) != doc.end()) ++n;
  }
  return n;
}

std::vector<double> evaluate(const Model<double>& model, std::span<const SyntheticTask::ValidationQuery> queries) {
  std::vector<double> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    const auto run = eval::rerank(model, q.id, q.query, q.candidates, q.candidates.size());
    std::vector<int> ranked;
    ranked.reserve(run.size());
    for (const auto& e : run) {
      const auto it = std::find_if(q.candidates.begin(), q.candidates.end(),
                                   [&](const eval::Candidate& c) { return c.doc_id == e.doc_id; });
      ranked.push_back(q.grades[static_cast<std::size_t>(it - q.candidates.begin())]);
    }
    out.push_back(eval::ndcg(ranked, q.grades, 10));
  }
  return out;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace) {
  out << "step,loss,ndcg10\n";
  for (const auto& r : trace) {
    out << r.step << ',' << r.loss << ',';
    if (r.ndcg10) out << *r.ndcg10;
    out << '\n';
  }
}

double learning_rate(const TrainOptions& options, std::size_t step) {
  const auto warmup = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(options.warmup_fraction * static_cast<double>(options.steps))));
  return options.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
}

TrainResult train_toy(const EncoderConfig& config, const SyntheticTask& task, const TrainOptions& options) {
  if (config.vocab_size < task.vocab_size())
    throw std::invalid_argument("train_toy: vocab_size " + std::to_string(config.vocab_size) + " < task vocabulary " +
                                std::to_string(task.vocab_size()));
  if (options.batch_pairs < 1) throw std::invalid_argument("train_toy: batch_pairs must be >= 1");
  if (config.max_positions < static_cast<Index>(task.query_terms + task.doc_len + 3))
    throw std::invalid_argument("train_toy: max_positions too small for the task");

  TrainResult result{Model<double>::initialize(config, options.seed), {}, {}, 0.0};
  const auto validation = task.validation_set(options.validation_seed);
  AdamW optimizer(AdamW::Options{0.9, 0.999, 1e-8, options.weight_decay});
  std::mt19937_64 rng(options.seed * 0x9E3779B97F4A7C15ull + 1);

  std::vector<Triple> batch(options.batch_pairs);
  for (std::size_t step = 1; step <= options.steps; ++step) {
    for (auto& t : batch) t = task.sample_triple(rng);
    BatchGradient g;
    try {
      g = batch_gradient(result.model, batch, options.loss);
    } catch (const NumericalError&) {
      throw DivergenceError(step);
    }
    if (!std::isfinite(g.loss)) throw DivergenceError(step);
    optimizer.step(result.model.weights, g.grads, learning_rate(options, step));

    TraceRow row{step, g.loss, std::nullopt};
    const bool last = step == options.steps;
    if (last || (options.eval_every > 0 && step % options.eval_every == 0)) {
      const auto per_query = evaluate(result.model, validation);
      row.ndcg10 = std::accumulate(per_query.begin(), per_query.end(), 0.0) / static_cast<double>(per_query.size());
      if (last) result.validation_ndcg = per_query;
    }
    result.trace.push_back(row);
  }
  if (options.steps == 0) result.validation_ndcg = evaluate(result.model, validation);
  if (!result.validation_ndcg.empty())
    result.mean_ndcg = std::accumulate(result.validation_ndcg.begin(), result.validation_ndcg.end(), 0.0) /
                       static_cast<double>(result.validation_ndcg.size());
  return result;
}

}  // namespace sce::train
