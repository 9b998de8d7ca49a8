// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sce/encoder.hpp"

namespace sce::eval {

struct RunEntry {
  std::string query_id;
  std::string doc_id;
  int rank = 0;
  double score = 0.0;
};

using Run = std::vector<RunEntry>;

/// Graded judgments, (query id, doc id) -> grade >= 0.
class Qrels {
 public:
  void set(const std::string& query_id, const std::string& doc_id, int grade);
  // 0 for unjudged documents.
  int grade(const std::string& query_id, const std::string& doc_id) const;
  bool has_query(const std::string& query_id) const { return judged_.contains(query_id); }
  std::vector<int> grades(const std::string& query_id) const;
  std::size_t query_count() const { return judged_.size(); }

 private:
  std::map<std::string, std::map<std::string, int>> judged_;
};

/// nDCG@k of one ranking: gains 2^g - 1, discount log2(rank + 1), ideal from
/// all judged grades of the query. 0 when nothing is relevant.
double ndcg(std::span<const int> ranked_grades, std::span<const int> judged_grades, std::size_t k = 10);

struct NdcgReport {
  std::map<std::string, double> per_query;
  double mean = 0.0;
  std::vector<std::string> warnings;
};

/// Ranks within each query follow the entry's rank field. Queries missing
/// from the qrels score 0 and add a warning.
NdcgReport ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k = 10);

/// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
double incomplete_beta(double a, double b, double x);

/// CDF of Student's t with `df` degrees of freedom.
double student_t_cdf(double t, double df);

struct TostResult {
  bool equivalent = false;
  double p_lower = 1.0;  // H0: mean(a - b) <= -bound
  double p_upper = 1.0;  // H0: mean(a - b) >= +bound
  double mean_difference = 0.0;
  double sd = 0.0;
  double t_lower = 0.0;
  double t_upper = 0.0;
  double df = 0.0;
};

/// Paired two one-sided t-tests on d = a - b; equivalent iff both p-values
/// are below alpha. Zero-variance differences are decided by |mean| < bound.
TostResult paired_tost(std::span<const double> a, std::span<const double> b, double bound = 0.02,
                       double alpha = 0.05);

struct Candidate {
  std::string doc_id;
  std::vector<TokenId> tokens;
};

using PairScorer = std::function<double(const Candidate&)>;

/// Scores every candidate, sorts by descending score with ties kept in input
/// order and returns the first top_k. A candidate whose scorer throws gets
/// -inf.
Run rerank(const std::string& query_id, std::span<const Candidate> candidates, const PairScorer& scorer,
           std::size_t top_k = 100, std::vector<std::string>* failures = nullptr);

template <typename T>
Run rerank(const Model<T>& model, const std::string& query_id, std::span<const TokenId> query,
           std::span<const Candidate> candidates, std::size_t top_k = 100, std::vector<std::string>* failures = nullptr) {
  return rerank(
      query_id, candidates,
      [&](const Candidate& c) {
        return static_cast<double>(score_sequence(assemble_input(query, c.tokens, model.config.max_positions), model));
      },
      top_k, failures);
}

// TREC formats: run lines `qid Q0 docid rank score tag`, qrels `qid 0 docid rel`.
Run read_run(std::istream& in);
void write_run(std::ostream& out, const Run& run, const std::string& tag);
Qrels read_qrels(std::istream& in);

// Throws unless ranks are 1..k per query and scores do not increase with rank.
void validate_run(const Run& run);

}  // namespace sce::eval
