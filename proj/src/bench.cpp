// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sce::bench {

std::vector<Index> default_doc_lengths() {
  std::vector<Index> out;
  for (Index total = 64; total <= 4096; total *= 2) out.push_back(total - 10);
  out.push_back(164);
  std::sort(out.begin(), out.end());
  return out;
}

void BenchSpec::validate() const {
  if (pattern == PatternKind::custom) throw std::invalid_argument("bench: pattern must be full, longformer, qds or sparse");
  if (query_len < 1) throw std::invalid_argument("bench: query_len must be >= 1");
  if (doc_lens.empty()) throw std::invalid_argument("bench: no document lengths");
  for (Index n : doc_lens)
    if (n < 1) throw std::invalid_argument("bench: document lengths must be >= 1, got " + std::to_string(n));
  if (batch < 1 || batch > 100) throw std::invalid_argument("bench: batch must lie in [1, 100]");
  if (repetitions < 3) throw std::invalid_argument("bench: repetitions must be >= 3");
  if (pattern == PatternKind::qds && global_every < 1) throw std::invalid_argument("bench: global_every must be >= 1");
  if (memory_limit < 0) throw std::invalid_argument("bench: memory limit must be >= 0");
}

std::string BenchSpec::label() const {
  return std::string(to_string(pattern)) + "/" + (pattern == PatternKind::full ? "inf" : window.to_string());
}

EncoderConfig bench_model_config(const BenchSpec& spec) {
  EncoderConfig c;
  c.layers = 2;
  c.embed_dim = 64;
  c.heads = 4;
  c.ff_dim = 256;
  c.vocab_size = 512;
  c.max_positions = spec.query_len + *std::max_element(spec.doc_lens.begin(), spec.doc_lens.end()) + 3;
  c.pattern = spec.pattern;
  c.window = spec.pattern == PatternKind::full ? Window::infinite() : spec.window;
  c.global_every = spec.global_every;
  c.precision = spec.precision;
  return c;
}

std::vector<TokenSequence> gen_random_batch(const BenchSpec& spec, Index doc_len, Index vocab_size,
                                            std::mt19937_64& rng) {
  if (vocab_size <= Vocabulary::kUnk + 1) throw std::invalid_argument("gen_random_batch: vocabulary has no terms");
  std::uniform_int_distribution<TokenId> term(Vocabulary::kUnk + 1, static_cast<TokenId>(vocab_size - 1));
  std::vector<TokenSequence> out;
  out.reserve(spec.batch);
  std::vector<TokenId> q(static_cast<std::size_t>(spec.query_len)), d(static_cast<std::size_t>(doc_len));
  for (std::size_t b = 0; b < spec.batch; ++b) {
    for (auto& t : q) t = term(rng);
    for (auto& t : d) t = term(rng);
    out.push_back(assemble_input(q, d, spec.query_len + doc_len + 3));
  }
  return out;
}

namespace {

std::uint64_t u(Index v) { return static_cast<std::uint64_t>(v); }

Index call_rows(const AttentionPlan& plan, const AttentionPlan::Call& call) {
  return call.global_rows ? static_cast<Index>(plan.globals.size()) : plan.partition.range(call.source).size;
}

// Columns of one score segment: the band width or the full target length.
Index segment_cols(const AttentionPlan& plan, const AttentionPlan::Target& t) {
  if (t.globals_only) return static_cast<Index>(plan.globals.size());
  if (t.window.is_infinite()) return plan.partition.range(t.group).size;
  return static_cast<Index>(t.window.band_width());
}

}  // namespace

FlopCount flop_count(const AttentionPattern& pattern, const SubsequencePartition& partition, Index embed_dim,
                     Index ff_dim, Index layers, Index heads) {
  if (heads < 1 || embed_dim % heads != 0) throw std::invalid_argument("flop_count: heads must divide embed_dim");
  partition.validate();
  const auto plan = AttentionPlan::build(partition, pattern);
  const Index s = partition.total();
  const Index d = embed_dim / heads;

  FlopCount f;
  std::uint64_t per_head = 0;
  for (const auto& call : plan.calls) {
    const Index rows = call_rows(plan, call);
    for (const auto& t : call.targets) {
      const std::uint64_t n = u(rows) * u(segment_cols(plan, t)) * u(d);
      per_head += n;
      if (!call.global_rows && call.source == Group::document && t.group == Group::document && !t.globals_only &&
          !t.window.is_infinite()) {
        f.doc_doc_band += n * u(heads) * u(layers);
        // Slots past the document end are padding, so the band is no cheaper.
        f.window_exceeds_document = static_cast<Index>(t.window.size()) >= partition.document.size - 1;
      }
    }
  }
  f.attention_scores = per_head * u(heads) * u(layers);
  f.attention_values = f.attention_scores;
  f.projections = 4 * u(s) * u(embed_dim) * u(embed_dim) * u(layers);
  f.feed_forward = 2 * u(s) * u(embed_dim) * u(ff_dim) * u(layers);
  return f;
}

FlopCount flop_count(const EncoderConfig& config, const SubsequencePartition& partition) {
  return flop_count(config.attention_pattern(), partition, config.embed_dim, config.ff_dim, config.layers, config.heads);
}

std::int64_t attention_buffer_bytes(const AttentionPlan& plan, std::size_t scalar_bytes) {
  std::int64_t best = 0;
  for (const auto& call : plan.calls) {
    std::int64_t cells = 0;
    for (const auto& t : call.targets) cells += call_rows(plan, call) * segment_cols(plan, t);
    best = std::max(best, cells * static_cast<std::int64_t>(scalar_bytes));
  }
  return best;
}

namespace {

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Restores the ledger limit on scope exit.
class LimitGuard {
 public:
  explicit LimitGuard(std::int64_t bytes) : saved_(mem::limit()) { mem::set_limit(bytes); }
  ~LimitGuard() { mem::set_limit(saved_); }
  LimitGuard(const LimitGuard&) = delete;
  LimitGuard& operator=(const LimitGuard&) = delete;

 private:
  std::int64_t saved_;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

template <typename T>
BenchRecord measure(const Model<T>& model, std::span<const TokenSequence> batch, const BenchSpec& spec) {
  if (batch.empty()) throw std::invalid_argument("measure: empty batch");
  if (spec.repetitions < 3) throw std::invalid_argument("measure: repetitions must be >= 3");
  const auto& first = batch.front();

  BenchRecord r;
  r.pattern = std::string(to_string(model.config.pattern));
  r.window = model.config.window;
  r.query_len = first.partition.query.size - 1;
  r.doc_len = first.partition.document.size - 1;
  r.sequence_len = first.length();
  r.batch = batch.size();
  r.precision = model.config.precision;
  r.threads = thread_count();
  r.weight_bytes = model.ticket.bytes();
  r.flops = flop_count(model.config, first.partition).total();

  auto pass = [&] {
    for (const auto& seq : batch) {
      const T score = score_sequence(seq, model);
      if (!std::isfinite(static_cast<double>(score))) throw NumericalError("measure: non-finite score");
    }
  };

  LimitGuard guard(spec.memory_limit);
  mem::reset_peaks();
  std::vector<double> per_doc;
  try {
    for (std::size_t i = 0; i < spec.warmup; ++i) pass();
    for (std::size_t i = 0; i < spec.repetitions; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      pass();
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      per_doc.push_back(dt.count() / static_cast<double>(batch.size()));
    }
  } catch (const mem::OutOfMemory&) {
    per_doc.clear();
  }
  const auto snap = mem::snapshot();
  r.peak_bytes = snap.total_peak;
  r.attention_peak_bytes = snap.peak_of(mem::Category::attention);
  if (!per_doc.empty()) {
    r.time_per_doc = median(per_doc);
    const double mean = std::accumulate(per_doc.begin(), per_doc.end(), 0.0) / static_cast<double>(per_doc.size());
    double ss = 0;
    for (double t : per_doc) ss += (t - mean) * (t - mean);
    r.time_stddev = std::sqrt(ss / static_cast<double>(per_doc.size() - 1));
  }
  return r;
}

namespace {

template <typename T>
std::vector<BenchRecord> run_typed(const BenchSpec& spec) {
  const auto config = bench_model_config(spec);
  const auto model = Model<T>::initialize(config, spec.seed);
  std::mt19937_64 rng(spec.seed ^ 0x5DEECE66Dull);
  std::vector<BenchRecord> out;
  for (Index n : spec.doc_lens) {
    const auto batch = gen_random_batch(spec, n, config.vocab_size, rng);
    out.push_back(measure<T>(model, batch, spec));
  }
  return out;
}

}  // namespace

std::vector<BenchRecord> run(const BenchSpec& spec) {
  spec.validate();
  return spec.precision == Precision::f32 ? run_typed<float>(spec) : run_typed<double>(spec);
}

ReportFormat parse_report_format(std::string_view text) {
  if (text == "csv") return ReportFormat::csv;
  if (text == "md" || text == "markdown") return ReportFormat::md;
  throw std::invalid_argument("unknown report format: " + std::string(text));
}

namespace {

std::string record_label(const BenchRecord& r) {
  return r.pattern + "/" + (r.pattern == "full" ? std::string("inf") : r.window.to_string());
}

std::string window_cell(const BenchRecord& r) { return r.pattern == "full" ? "inf" : r.window.to_string(); }

std::string relative(double x, double base) {
  if (!(base > 0)) return "-";
  std::ostringstream s;
  const double pct = 100.0 * (x - base) / base;
  s << (pct >= 0 ? "+" : "") << std::fixed << std::setprecision(0) << pct << '%';
  return s.str();
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

std::string emit_report(std::span<const BenchRecord> records, ReportFormat format, const std::string& baseline) {
  if (records.empty()) throw std::invalid_argument("emit_report: no records");
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    out << "pattern,w,query_len,doc_len,batch,time_per_doc_s,peak_bytes,flops,threads\n";
    out << std::setprecision(9);
    for (const auto& r : records) {
      out << r.pattern << ',' << window_cell(r) << ',' << r.query_len << ',' << r.doc_len << ',' << r.batch << ',';
      if (r.oom())
        out << "OOM,OOM,";
      else
        out << *r.time_per_doc << ',' << r.peak_bytes << ',';
      out << r.flops << ',' << r.threads << '\n';
    }
    return out.str();
  }

  std::map<Index, const BenchRecord*> base;
  if (!baseline.empty()) {
    for (const auto& r : records)
      if (record_label(r) == baseline && !r.oom()) base[r.doc_len] = &r;
    if (base.empty()) throw std::invalid_argument("emit_report: no measured rows for baseline " + baseline);
  }
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"pattern", "w", "query_len", "doc_len", "batch", "ms/doc", "peak bytes", "MFLOP"};
  if (!base.empty()) header = {"pattern", "w", "query_len", "doc_len", "batch", "ms/doc", "rel", "peak bytes", "rel",
                               "MFLOP", "rel"};
  rows.push_back(header);
  for (const auto& r : records) {
    const auto b = base.find(r.doc_len);
    const BenchRecord* ref = b == base.end() ? nullptr : b->second;
    const std::string mflop = fixed(static_cast<double>(r.flops) / 1e6, 2);
    std::vector<std::string> row{r.pattern, window_cell(r), std::to_string(r.query_len), std::to_string(r.doc_len),
                                 std::to_string(r.batch)};
    if (r.oom()) {
      row.insert(row.end(), {"OOM"});
      if (!base.empty()) row.push_back("-");
      row.push_back("OOM");
      if (!base.empty()) row.push_back("-");
    } else {
      row.push_back(fixed(*r.time_per_doc * 1e3, 3));
      if (!base.empty()) row.push_back(ref ? relative(*r.time_per_doc, *ref->time_per_doc) : "-");
      row.push_back(std::to_string(r.peak_bytes));
      if (!base.empty())
        row.push_back(ref ? relative(static_cast<double>(r.peak_bytes), static_cast<double>(ref->peak_bytes)) : "-");
    }
    row.push_back(mflop);
    if (!base.empty())
      row.push_back(ref ? relative(static_cast<double>(r.flops), static_cast<double>(ref->flops)) : "-");
    rows.push_back(std::move(row));
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  auto emit_row = [&](const std::vector<std::string>& row) {
    out << '|';
    for (std::size_t c = 0; c < row.size(); ++c) {
      const bool text = c < 2;
      out << ' ' << (text ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << row[c] << " |";
    }
    out << '\n';
  };
  emit_row(rows.front());
  out << '|';
  for (std::size_t c = 0; c < header.size(); ++c) out << (c < 2 ? ":" : "-") << std::string(width[c], '-') << (c < 2 ? "-|" : ":|");
  out << '\n';
  for (std::size_t i = 1; i < rows.size(); ++i) emit_row(rows[i]);
  out << "\nthreads: " << records.front().threads << ", precision: " << to_string(records.front().precision);
  if (!base.empty()) out << ", baseline: " << baseline;
  out << '\n';
  return out.str();
}

template BenchRecord measure<float>(const Model<float>&, std::span<const TokenSequence>, const BenchSpec&);
template BenchRecord measure<double>(const Model<double>&, std::span<const TokenSequence>, const BenchSpec&);

}  // namespace sce::bench
