// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sce/encoder.hpp"
#include "sce/eval.hpp"

namespace sce::train {

// ((s+ - s-) - (t+ - t-))^2
double margin_mse_loss(double s_pos, double s_neg, double t_pos, double t_neg);
// log(1 + exp(-(s+ - s-))), stable for any margin.
double ranknet_loss(double s_pos, double s_neg);

enum class LossKind { ranknet, margin_mse };

std::string_view to_string(LossKind k);
LossKind parse_loss_kind(std::string_view text);

struct Triple {
  std::vector<TokenId> query;
  std::vector<TokenId> positive;
  std::vector<TokenId> negative;
  std::optional<double> teacher_positive;
  std::optional<double> teacher_negative;
};

/// Pairwise loss of one triple and its derivatives with respect to the two
/// student scores.
struct PairLoss {
  double loss = 0.0;
  double d_positive = 0.0;
  double d_negative = 0.0;
};

PairLoss pair_loss(LossKind kind, const Triple& t, double s_pos, double s_neg);

/// Mean loss over the batch and its gradient with respect to every weight.
struct BatchGradient {
  double loss = 0.0;
  EncoderWeights<double> grads;
};

double batch_loss(const Model<double>& model, std::span<const Triple> batch, LossKind kind);
BatchGradient batch_gradient(const Model<double>& model, std::span<const Triple> batch, LossKind kind);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst_tensor;
};

/// Central differences on `samples` randomly chosen parameters (at least one
/// per tensor) against the analytic batch gradient. Relative error is
/// |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(Model<double>& model, std::span<const Triple> batch, LossKind kind, double eps = 1e-4,
                           std::size_t samples = 200, std::uint64_t seed = 0, double floor = 1e-7);

/// Decoupled weight decay Adam.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(Options options) : options_(options) {}

  void step(EncoderWeights<double>& weights, const EncoderWeights<double>& grads, double lr);
  std::int64_t steps() const { return t_; }

 private:
  Options options_;
  std::int64_t t_ = 0;
  std::optional<EncoderWeights<double>> m_, v_;
};

/// Term-overlap retrieval task. A query is `query_terms` distinct terms; a
/// document is `doc_len` terms and its relevance grade is the number of query
/// terms it contains.
struct SyntheticTask {
  std::size_t vocab_terms = 20;
  std::size_t query_terms = 3;
  std::size_t doc_len = 8;
  std::size_t validation_queries = 60;
  std::size_t candidates = 20;
  // Share of triples whose positive and negative overlaps are any p > n
  // instead of query_terms and 0.
  double graded_fraction = 0.5;

  Vocabulary vocabulary() const { return Vocabulary::synthetic(vocab_terms); }
  Index vocab_size() const { return static_cast<Index>(vocab_terms) + 3; }

  std::vector<TokenId> sample_query(std::mt19937_64& rng) const;
  // Document holding exactly `overlap` distinct query terms among distractors.
  std::vector<TokenId> sample_document(std::span<const TokenId> query, std::size_t overlap, std::mt19937_64& rng) const;
  // Positive holds every query term, negative none (or graded, see above);
  // teacher scores are the overlap counts.
  Triple sample_triple(std::mt19937_64& rng) const;

  struct ValidationQuery {
    std::string id;
    std::vector<TokenId> query;
    std::vector<eval::Candidate> candidates;
    std::vector<int> grades;  // aligned with candidates
  };
  // Candidate i has overlap i mod (query_terms + 1), shuffled.
  std::vector<ValidationQuery> validation_set(std::uint64_t seed) const;

  static std::size_t overlap(std::span<const TokenId> query, std::span<const TokenId> doc);
};

/// nDCG@10 per validation query after re-ranking its candidates.
std::vector<double> evaluate(const Model<double>& model, std::span<const SyntheticTask::ValidationQuery> queries);

struct TrainOptions {
  std::size_t steps = 2000;
  double lr = 2e-3;
  std::size_t batch_pairs = 16;
  double warmup_fraction = 0.01;
  double weight_decay = 0.01;
  LossKind loss = LossKind::margin_mse;
  std::size_t eval_every = 250;  // 0 evaluates only at the end
  std::uint64_t seed = 0;
  std::uint64_t validation_seed = 1000;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> ndcg10;
};

void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace);

class DivergenceError : public NumericalError {
 public:
  explicit DivergenceError(std::size_t step)
      : NumericalError("training diverged at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainResult {
  Model<double> model;
  std::vector<TraceRow> trace;
  std::vector<double> validation_ndcg;  // per query, final weights
  double mean_ndcg = 0.0;
};

/// Learning rate at 1-based `step`: linear warm-up then constant.
double learning_rate(const TrainOptions& options, std::size_t step);

/// Trains a freshly initialized model (seeded by options.seed) on triples
/// drawn from `task`. Throws DivergenceError when the loss stops being finite.
TrainResult train_toy(const EncoderConfig& config, const SyntheticTask& task, const TrainOptions& options);

}  // namespace sce::train
