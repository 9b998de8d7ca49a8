// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/eval.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace sce::eval {

void Qrels::set(const std::string& query_id, const std::string& doc_id, int grade) {
  if (grade < 0) throw std::invalid_argument("qrels: negative grade for " + query_id + "/" + doc_id);
  judged_[query_id][doc_id] = grade;
}

int Qrels::grade(const std::string& query_id, const std::string& doc_id) const {
  const auto q = judged_.find(query_id);
  if (q == judged_.end()) return 0;
  const auto d = q->second.find(doc_id);
  return d == q->second.end() ? 0 : d->second;
}

std::vector<int> Qrels::grades(const std::string& query_id) const {
  std::vector<int> out;
  const auto q = judged_.find(query_id);
  if (q != judged_.end())
    for (const auto& [doc, g] : q->second) out.push_back(g);
  return out;
}

namespace {

double dcg(std::span<const int> grades, std::size_t k) {
  double total = 0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i)
    total += (std::exp2(static_cast<double>(grades[i])) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  return total;
}

}  // namespace

double ndcg(std::span<const int> ranked_grades, std::span<const int> judged_grades, std::size_t k) {
  if (k < 1) throw std::invalid_argument("ndcg: k must be >= 1");
  std::vector<int> ideal(judged_grades.begin(), judged_grades.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const double best = dcg(ideal, k);
  if (best <= 0) return 0.0;
  return dcg(ranked_grades, k) / best;
}

NdcgReport ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k) {
  std::map<std::string, std::vector<const RunEntry*>> by_query;
  for (const auto& e : run) by_query[e.query_id].push_back(&e);

  NdcgReport report;
  for (auto& [qid, entries] : by_query) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const RunEntry* a, const RunEntry* b) { return a->rank < b->rank; });
    if (!qrels.has_query(qid)) {
      report.warnings.push_back("query " + qid + " has no judgments; scored 0");
      report.per_query[qid] = 0.0;
      continue;
    }
    std::vector<int> ranked;
    ranked.reserve(entries.size());
    for (const auto* e : entries) ranked.push_back(qrels.grade(qid, e->doc_id));
    report.per_query[qid] = ndcg(ranked, qrels.grades(qid), k);
  }
  if (!report.per_query.empty()) {
    double sum = 0;
    for (const auto& [qid, v] : report.per_query) sum += v;
    report.mean = sum / static_cast<double>(report.per_query.size());
  }
  return report;
}

namespace {

// Continued fraction for I_x(a, b), evaluated where it converges fast.
double beta_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1;
  double d = 1 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1) < kEps) return h;
  }
  throw std::runtime_error("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0)) throw std::invalid_argument("incomplete_beta: a and b must be positive");
  if (std::isnan(x) || x < 0 || x > 1) throw std::invalid_argument("incomplete_beta: x outside [0, 1]");
  if (x == 0) return 0;
  if (x == 1) return 1;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_fraction(a, b, x) / a;
  return 1 - front * beta_fraction(b, a, 1 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0)) throw std::invalid_argument("student_t_cdf: df must be positive");
  if (std::isnan(t)) return t;
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(df / 2, 0.5, df / (df + t * t));
  return t > 0 ? 1 - tail : tail;
}

TostResult paired_tost(std::span<const double> a, std::span<const double> b, double bound, double alpha) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_tost: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_tost: need at least two pairs");
  if (!(bound > 0)) throw std::invalid_argument("paired_tost: bound must be positive");
  if (!(alpha > 0 && alpha < 1)) throw std::invalid_argument("paired_tost: alpha must lie in (0, 1)");

  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0;
  for (double x : d) ss += (x - mean) * (x - mean);

  TostResult r;
  r.mean_difference = mean;
  r.df = n - 1;
  r.sd = std::sqrt(ss / (n - 1));
  const double se = r.sd / std::sqrt(n);
  // Differences equal up to rounding count as zero variance.
  const double scale = std::max({std::abs(mean), bound, 1.0});
  if (se <= 1e-14 * scale) {
    r.p_lower = mean > -bound ? 0.0 : 1.0;
    r.p_upper = mean < bound ? 0.0 : 1.0;
    r.t_lower = mean > -bound ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.t_upper = mean < bound ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    r.equivalent = std::abs(mean) < bound;
    return r;
  }
  r.t_lower = (mean + bound) / se;
  r.t_upper = (mean - bound) / se;
  r.p_lower = 1 - student_t_cdf(r.t_lower, r.df);
  r.p_upper = student_t_cdf(r.t_upper, r.df);
  r.equivalent = std::max(r.p_lower, r.p_upper) < alpha;
  return r;
}

Run rerank(const std::string& query_id, std::span<const Candidate> candidates, const PairScorer& scorer,
           std::size_t top_k, std::vector<std::string>* failures) {
  if (candidates.empty()) throw std::invalid_argument("rerank: no candidates");
  if (top_k < 1) throw std::invalid_argument("rerank: top_k must be >= 1");
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    try {
      scores[i] = scorer(candidates[i]);
      if (std::isnan(scores[i])) throw NumericalError("score is NaN");
    } catch (const std::exception& e) {
      scores[i] = -std::numeric_limits<double>::infinity();
      if (failures) failures->push_back(candidates[i].doc_id + ": " + e.what());
    }
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });

  Run run;
  const std::size_t keep = std::min(top_k, order.size());
  run.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r)
    run.push_back({query_id, candidates[order[r]].doc_id, static_cast<int>(r + 1), scores[order[r]]});
  return run;
}

Run read_run(std::istream& in) {
  Run run;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    RunEntry e;
    std::string q0, tag;
    if (!(fields >> e.query_id >> q0 >> e.doc_id >> e.rank >> e.score >> tag))
      throw std::runtime_error("run: malformed line " + std::to_string(line_no));
    run.push_back(std::move(e));
  }
  return run;
}

void write_run(std::ostream& out, const Run& run, const std::string& tag) {
  std::ostringstream line;
  line.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& e : run) {
    line.str("");
    line << e.query_id << " Q0 " << e.doc_id << ' ' << e.rank << ' ' << e.score << ' ' << tag << '\n';
    out << line.str();
  }
}

Qrels read_qrels(std::istream& in) {
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string qid, iteration, doc;
    int grade = 0;
    if (!(fields >> qid >> iteration >> doc >> grade))
      throw std::runtime_error("qrels: malformed line " + std::to_string(line_no));
    qrels.set(qid, doc, grade);
  }
  return qrels;
}

void validate_run(const Run& run) {
  std::map<std::string, std::vector<const RunEntry*>> by_query;
  for (const auto& e : run) by_query[e.query_id].push_back(&e);
  for (auto& [qid, entries] : by_query) {
    std::sort(entries.begin(), entries.end(), [](const RunEntry* a, const RunEntry* b) { return a->rank < b->rank; });
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i]->rank != static_cast<int>(i + 1))
        throw std::runtime_error("run: ranks of query " + qid + " are not 1..k");
      if (i > 0 && entries[i]->score > entries[i - 1]->score)
        throw std::runtime_error("run: scores of query " + qid + " increase with rank");
    }
  }
}

}  // namespace sce::eval
