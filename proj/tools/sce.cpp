// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

// Command line front end: bench, train, synth, rerank and tost.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sce/bench.hpp"
#include "sce/eval.hpp"
#include "sce/serialize.hpp"
#include "sce/training.hpp"

namespace fs = std::filesystem;
using namespace sce;

namespace {

// Bad flags, inconsistent settings or unreadable inputs.
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  return in;
}

// Writes to `path`, or stdout when it is empty or "-".
template <typename F>
void with_output(const std::string& path, F&& write) {
  if (path.empty() || path == "-") {
    write(std::cout);
    return;
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  write(out);
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

// id<TAB>text lines.
std::map<std::string, std::string> read_tsv(const std::string& path) {
  auto in = open_input(path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError(path + ":" + std::to_string(line_no) + ": expected id<TAB>text");
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

std::string join_terms(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

// ---- bench

struct BenchArgs {
  std::string patterns = "sparse";
  std::string window = "4";
  Index query_len = 10;
  std::string doc_lens;
  std::size_t batch = 8;
  std::size_t reps = 5;
  std::size_t warmup = 2;
  std::string precision = "f32";
  std::uint64_t seed = 0;
  std::string format = "csv";
  std::string baseline;
  std::int64_t mem_limit = 0;
  std::string output;
};

// "longformer/64" or "full"
bench::BenchSpec parse_label(const std::string& label, const bench::BenchSpec& base) {
  auto spec = base;
  const auto slash = label.find('/');
  spec.pattern = parse_pattern_kind(label.substr(0, slash));
  if (slash != std::string::npos) spec.window = Window::parse(label.substr(slash + 1));
  if (spec.pattern == PatternKind::full) spec.window = Window::infinite();
  return spec;
}

int run_bench(const BenchArgs& a) {
  bench::BenchSpec base;
  base.window = Window::parse(a.window);
  base.query_len = a.query_len;
  if (!a.doc_lens.empty()) {
    base.doc_lens.clear();
    for (const auto& n : split(a.doc_lens, ',')) base.doc_lens.push_back(std::stol(n));
  }
  base.batch = a.batch;
  base.repetitions = a.reps;
  base.warmup = a.warmup;
  base.precision = parse_precision(a.precision);
  base.seed = a.seed;
  base.memory_limit = a.mem_limit;
  const auto format = bench::parse_report_format(a.format);

  std::vector<bench::BenchSpec> specs;
  for (const auto& p : split(a.patterns, ',')) specs.push_back(parse_label(p, base));
  std::string baseline;
  if (!a.baseline.empty()) {
    auto b = parse_label(a.baseline, base);
    baseline = b.label();
    bool present = false;
    for (const auto& s : specs) present = present || s.label() == baseline;
    if (!present) specs.insert(specs.begin(), b);
  }
  for (const auto& s : specs) s.validate();

  std::vector<bench::BenchRecord> records;
  for (const auto& s : specs) {
    std::cerr << "bench " << s.label() << '\n';
    auto r = bench::run(s);
    records.insert(records.end(), r.begin(), r.end());
  }
  with_output(a.output, [&](std::ostream& out) { out << bench::emit_report(records, format, baseline); });
  return 0;
}

// ---- train

struct TrainArgs {
  std::string pattern = "sparse";
  std::string window = "4";
  Index layers = 2, embed = 64, heads = 2, ff = 128;
  std::size_t global_every = 30;
  std::string padding = "exclude";
  train::SyntheticTask task;
  train::TrainOptions options;
  std::string loss = "margin-mse";
  std::string trace;
  std::string save;
};

int run_train(TrainArgs a) {
  EncoderConfig c;
  c.layers = a.layers;
  c.embed_dim = a.embed;
  c.heads = a.heads;
  c.ff_dim = a.ff;
  c.pattern = parse_pattern_kind(a.pattern);
  c.window = c.pattern == PatternKind::full ? Window::infinite() : Window::parse(a.window);
  c.global_every = a.global_every;
  c.padding = parse_padding_mode(a.padding);
  c.vocab_size = a.task.vocab_size();
  c.max_positions = static_cast<Index>(a.task.query_terms + a.task.doc_len + 3);
  c.validate();
  a.options.loss = train::parse_loss_kind(a.loss);

  const auto result = train::train_toy(c, a.task, a.options);
  with_output(a.trace, [&](std::ostream& out) { train::write_trace_csv(out, result.trace); });
  std::cerr << "validation nDCG@10 " << result.mean_ndcg << " over " << result.validation_ndcg.size() << " queries\n";
  if (!a.save.empty()) {
    const auto vocab = a.task.vocabulary();
    io::save_model(result.model, a.save, &vocab);
  }
  return 0;
}

// ---- synth

struct SynthArgs {
  train::SyntheticTask task;
  std::uint64_t seed = 1000;
  std::string dir;
};

// Writes a validation set as files the rerank and tost commands read.
int run_synth(const SynthArgs& a) {
  fs::create_directories(a.dir);
  const auto vocab = a.task.vocabulary();
  const auto set = a.task.validation_set(a.seed);
  std::ofstream queries(fs::path(a.dir) / "queries.tsv"), docs(fs::path(a.dir) / "docs.tsv"),
      run(fs::path(a.dir) / "candidates.run"), qrels(fs::path(a.dir) / "qrels.txt");
  if (!queries || !docs || !run || !qrels) throw ConfigError("cannot write into " + a.dir);
  for (const auto& q : set) {
    queries << q.id << '\t' << join_terms(vocab, q.query) << '\n';
    eval::Run candidates;
    for (std::size_t i = 0; i < q.candidates.size(); ++i) {
      const auto& c = q.candidates[i];
      docs << c.doc_id << '\t' << join_terms(vocab, c.tokens) << '\n';
      qrels << q.id << " 0 " << c.doc_id << ' ' << q.grades[i] << '\n';
      candidates.push_back({q.id, c.doc_id, static_cast<int>(i + 1), -static_cast<double>(i)});
    }
    eval::write_run(run, candidates, "candidates");
  }
  std::cerr << "wrote " << set.size() << " queries to " << a.dir << '\n';
  return 0;
}

// ---- rerank

struct RerankArgs {
  std::string model, queries, docs, run, qrels, output, tag = "sce";
  std::size_t top_k = 100;
};

int run_rerank(const RerankArgs& a) {
  const auto model = io::load_model<double>(a.model);
  const auto vocab = io::load_vocabulary(a.model);
  if (!vocab) throw ConfigError(a.model + " has no vocab.txt");
  const auto queries = read_tsv(a.queries);
  const auto docs = read_tsv(a.docs);
  auto run_in = open_input(a.run);
  const auto first_stage = eval::read_run(run_in);

  std::map<std::string, std::vector<const eval::RunEntry*>> by_query;
  for (const auto& e : first_stage) by_query[e.query_id].push_back(&e);

  eval::Run out;
  std::vector<std::string> failures;
  for (auto& [qid, entries] : by_query) {
    const auto q = queries.find(qid);
    if (q == queries.end()) throw ConfigError("query " + qid + " missing from " + a.queries);
    std::sort(entries.begin(), entries.end(), [](auto* x, auto* y) { return x->rank < y->rank; });
    std::vector<eval::Candidate> candidates;
    for (const auto* e : entries) {
      const auto d = docs.find(e->doc_id);
      if (d == docs.end()) throw ConfigError("document " + e->doc_id + " missing from " + a.docs);
      candidates.push_back({e->doc_id, vocab->encode(d->second)});
    }
    const auto ranked = eval::rerank(model, qid, vocab->encode(q->second), candidates, a.top_k, &failures);
    out.insert(out.end(), ranked.begin(), ranked.end());
  }
  for (const auto& f : failures) std::cerr << "warning: " << f << '\n';
  with_output(a.output, [&](std::ostream& o) { eval::write_run(o, out, a.tag); });
  if (!a.qrels.empty()) {
    auto in = open_input(a.qrels);
    const auto report = eval::ndcg_at_k(out, eval::read_qrels(in), 10);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    std::cerr << "nDCG@10 " << report.mean << " over " << report.per_query.size() << " queries\n";
  }
  return 0;
}

// ---- tost

struct TostArgs {
  std::string run_a, run_b, qrels;
  std::size_t k = 10;
  double bound = 0.02, alpha = 0.05;
};

int run_tost(const TostArgs& a) {
  auto qin = open_input(a.qrels);
  const auto qrels = eval::read_qrels(qin);
  auto ain = open_input(a.run_a);
  auto bin = open_input(a.run_b);
  const auto ra = eval::ndcg_at_k(eval::read_run(ain), qrels, a.k);
  const auto rb = eval::ndcg_at_k(eval::read_run(bin), qrels, a.k);
  std::vector<double> xa, xb;
  for (const auto& [qid, v] : ra.per_query) {
    const auto it = rb.per_query.find(qid);
    if (it == rb.per_query.end()) continue;
    xa.push_back(v);
    xb.push_back(it->second);
  }
  if (xa.size() < 2) throw ConfigError("fewer than two queries appear in both runs");
  const auto t = eval::paired_tost(xa, xb, a.bound, a.alpha);
  std::cout.precision(6);
  std::cout << "queries " << xa.size() << "\n"
            << "mean_a " << std::accumulate(xa.begin(), xa.end(), 0.0) / xa.size() << "\n"
            << "mean_b " << std::accumulate(xb.begin(), xb.end(), 0.0) / xb.size() << "\n"
            << "mean_difference " << t.mean_difference << "\n"
            << "sd " << t.sd << "\n"
            << "t_lower " << t.t_lower << " p_lower " << t.p_lower << "\n"
            << "t_upper " << t.t_upper << " p_upper " << t.p_upper << "\n"
            << "equivalent " << (t.equivalent ? "yes" : "no") << " (bound " << a.bound << ", alpha " << a.alpha
            << ")\n";
  return 0;
}

void add_task_options(CLI::App* cmd, train::SyntheticTask& task) {
  cmd->add_option("--vocab-terms", task.vocab_terms, "Distinct terms")->capture_default_str();
  cmd->add_option("--query-terms", task.query_terms, "Terms per query")->capture_default_str();
  cmd->add_option("--doc-len", task.doc_len, "Terms per document")->capture_default_str();
  cmd->add_option("--val-queries", task.validation_queries, "Validation queries")->capture_default_str();
  cmd->add_option("--candidates", task.candidates, "Candidates per validation query")->capture_default_str();
  cmd->add_option("--graded", task.graded_fraction, "Share of graded training pairs")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse cross-encoder toolkit"};
  app.require_subcommand(1);

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Time and memory on random batches");
  bench_cmd->add_option("--pattern", bench_args.patterns, "full, longformer, qds or sparse; comma list, entries may be pattern/w")
      ->capture_default_str();
  bench_cmd->add_option("--window", bench_args.window, "Window size or inf")->capture_default_str();
  bench_cmd->add_option("--query-len", bench_args.query_len, "Query tokens")->capture_default_str();
  bench_cmd->add_option("--doc-lens", bench_args.doc_lens, "Comma separated document lengths");
  bench_cmd->add_option("--batch", bench_args.batch, "Documents per batch")->capture_default_str();
  bench_cmd->add_option("--reps", bench_args.reps, "Timed repetitions")->capture_default_str();
  bench_cmd->add_option("--warmup", bench_args.warmup, "Discarded warm-up rounds")->capture_default_str();
  bench_cmd->add_option("--precision", bench_args.precision, "f32 or f64")->capture_default_str();
  bench_cmd->add_option("--seed", bench_args.seed, "Seed")->capture_default_str();
  bench_cmd->add_option("--format", bench_args.format, "csv or md")->capture_default_str();
  bench_cmd->add_option("--baseline", bench_args.baseline, "Baseline row for relative columns, e.g. longformer/64");
  bench_cmd->add_option("--mem-limit", bench_args.mem_limit, "Tracked allocation limit in bytes (0: none)");
  bench_cmd->add_option("-o,--output", bench_args.output, "Report file (default stdout)");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a toy model on the synthetic overlap task");
  train_cmd->add_option("--pattern", train_args.pattern)->capture_default_str();
  train_cmd->add_option("--window", train_args.window)->capture_default_str();
  train_cmd->add_option("--layers", train_args.layers)->capture_default_str();
  train_cmd->add_option("--embed", train_args.embed)->capture_default_str();
  train_cmd->add_option("--heads", train_args.heads)->capture_default_str();
  train_cmd->add_option("--ff", train_args.ff)->capture_default_str();
  train_cmd->add_option("--global-every", train_args.global_every)->capture_default_str();
  train_cmd->add_option("--padding", train_args.padding, "exclude or zero-logit")->capture_default_str();
  train_cmd->add_option("--steps", train_args.options.steps)->capture_default_str();
  train_cmd->add_option("--lr", train_args.options.lr)->capture_default_str();
  train_cmd->add_option("--batch-pairs", train_args.options.batch_pairs)->capture_default_str();
  train_cmd->add_option("--warmup-fraction", train_args.options.warmup_fraction)->capture_default_str();
  train_cmd->add_option("--weight-decay", train_args.options.weight_decay)->capture_default_str();
  train_cmd->add_option("--loss", train_args.loss, "ranknet or margin-mse")->capture_default_str();
  train_cmd->add_option("--eval-every", train_args.options.eval_every)->capture_default_str();
  train_cmd->add_option("--seed", train_args.options.seed)->capture_default_str();
  train_cmd->add_option("--val-seed", train_args.options.validation_seed)->capture_default_str();
  train_cmd->add_option("--trace", train_args.trace, "Metric trace CSV (default stdout)");
  train_cmd->add_option("--save", train_args.save, "Directory for the trained model");
  add_task_options(train_cmd, train_args.task);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic query set as TSV, run and qrels files");
  synth_cmd->add_option("dir", synth_args.dir, "Output directory")->required();
  synth_cmd->add_option("--seed", synth_args.seed)->capture_default_str();
  add_task_options(synth_cmd, synth_args.task);

  RerankArgs rerank_args;
  auto* rerank_cmd = app.add_subcommand("rerank", "Re-rank a first-stage TREC run");
  rerank_cmd->add_option("--model", rerank_args.model, "Model directory")->required();
  rerank_cmd->add_option("--queries", rerank_args.queries, "qid<TAB>text")->required();
  rerank_cmd->add_option("--docs", rerank_args.docs, "docid<TAB>text")->required();
  rerank_cmd->add_option("--run", rerank_args.run, "First-stage TREC run")->required();
  rerank_cmd->add_option("--qrels", rerank_args.qrels, "Report nDCG@10 against these judgments");
  rerank_cmd->add_option("--top-k", rerank_args.top_k)->capture_default_str();
  rerank_cmd->add_option("--tag", rerank_args.tag)->capture_default_str();
  rerank_cmd->add_option("-o,--output", rerank_args.output, "Output run (default stdout)");

  TostArgs tost_args;
  auto* tost_cmd = app.add_subcommand("tost", "Paired equivalence test of two runs on per-query nDCG");
  tost_cmd->add_option("run_a", tost_args.run_a)->required();
  tost_cmd->add_option("run_b", tost_args.run_b)->required();
  tost_cmd->add_option("--qrels", tost_args.qrels)->required();
  tost_cmd->add_option("--k", tost_args.k)->capture_default_str();
  tost_cmd->add_option("--bound", tost_args.bound)->capture_default_str();
  tost_cmd->add_option("--alpha", tost_args.alpha)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*bench_cmd) return run_bench(bench_args);
    if (*train_cmd) return run_train(train_args);
    if (*synth_cmd) return run_synth(synth_args);
    if (*rerank_cmd) return run_rerank(rerank_args);
    if (*tost_cmd) return run_tost(tost_args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}
