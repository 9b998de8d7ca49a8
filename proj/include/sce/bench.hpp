// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sce/encoder.hpp"

// Efficiency measurements on random inputs: per-document latency, tracked
// peak memory and multiply-add counts.
namespace sce::bench {

// 54 .. 4086 so that query + document fill powers of two, plus 164.
std::vector<Index> default_doc_lengths();

struct BenchSpec {
  PatternKind pattern = PatternKind::sparse;
  Window window = Window::of(4);
  Index query_len = 10;
  std::vector<Index> doc_lens = default_doc_lengths();
  std::size_t batch = 8;
  std::size_t repetitions = 5;
  std::size_t warmup = 2;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;
  std::size_t global_every = 30;
  // Tracked-allocation limit in bytes; 0 is unlimited.
  std::int64_t memory_limit = 0;

  // Throws std::invalid_argument on an unusable spec.
  void validate() const;
  std::string label() const;  // e.g. "sparse/4"
};

/// Model used for timing. Widths are desk-scale; max_positions covers the
/// longest document of the spec.
EncoderConfig bench_model_config(const BenchSpec& spec);

/// `batch` random sequences of query_len + doc_len + 3 tokens with uniform
/// term ids.
std::vector<TokenSequence> gen_random_batch(const BenchSpec& spec, Index doc_len, Index vocab_size,
                                            std::mt19937_64& rng);

/// Closed-form multiply-adds of one forward pass through the encoder layers,
/// as executed by the reference kernels (band padding slots included).
struct FlopCount {
  std::uint64_t projections = 0;       // Q, K, V and output
  std::uint64_t feed_forward = 0;
  std::uint64_t attention_scores = 0;  // every Q K segment
  std::uint64_t attention_values = 0;  // every P V segment
  std::uint64_t doc_doc_band = 0;      // scores of the windowed document-document segment
  // The document window covers the whole document, so the band costs at
  // least as much as the dense product would.
  bool window_exceeds_document = false;

  std::uint64_t attention() const { return attention_scores + attention_values; }
  std::uint64_t total() const { return projections + feed_forward + attention(); }
};

FlopCount flop_count(const AttentionPattern& pattern, const SubsequencePartition& partition, Index embed_dim,
                     Index ff_dim, Index layers, Index heads);
FlopCount flop_count(const EncoderConfig& config, const SubsequencePartition& partition);

/// Largest simultaneous score storage of one head: the maximum over plan
/// calls of the summed segment sizes (rows x (2w+1) or rows x target length).
std::int64_t attention_buffer_bytes(const AttentionPlan& plan, std::size_t scalar_bytes);

struct BenchRecord {
  std::string pattern;
  Window window = Window::infinite();
  Index query_len = 0;
  Index doc_len = 0;
  Index sequence_len = 0;
  std::size_t batch = 0;
  Precision precision = Precision::f32;
  int threads = 1;
  // Empty when the run exceeded the memory limit.
  std::optional<double> time_per_doc;
  double time_stddev = 0.0;  // across repetitions, per document
  std::int64_t peak_bytes = 0;
  std::int64_t attention_peak_bytes = 0;
  std::int64_t weight_bytes = 0;
  std::uint64_t flops = 0;

  bool oom() const { return !time_per_doc.has_value(); }
};

/// Runs the warm-up rounds, then times `repetitions` passes over the batch
/// and reports the median per document. Peaks come from the tracked
/// allocation ledger.
template <typename T>
BenchRecord measure(const Model<T>& model, std::span<const TokenSequence> batch, const BenchSpec& spec);

/// Builds the bench model and measures every document length of the spec.
std::vector<BenchRecord> run(const BenchSpec& spec);

enum class ReportFormat { csv, md };
ReportFormat parse_report_format(std::string_view text);

/// CSV columns: pattern,w,query_len,doc_len,batch,time_per_doc_s,peak_bytes,
/// flops,threads. The markdown table adds differences relative to the rows
/// labelled `baseline` (e.g. "longformer/64") at the same document length.
std::string emit_report(std::span<const BenchRecord> records, ReportFormat format, const std::string& baseline = "");

}  // namespace sce::bench
