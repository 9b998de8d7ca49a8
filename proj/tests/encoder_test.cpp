// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include "oracle.hpp"
#include "sce/encoder.hpp"
#include "support.hpp"

using namespace sce;
using sce::testing::max_rel_error;

namespace {

EncoderConfig small_config(PatternKind kind, Window w, Index layers = 2) {
  EncoderConfig c;
  c.layers = layers;
  c.embed_dim = 8;
  c.heads = 2;
  c.ff_dim = 12;
  c.max_positions = 40;
  c.vocab_size = 20;
  c.pattern = kind;
  c.window = w;
  c.global_every = 4;
  return c;
}

TokenSequence random_sequence(Index m, Index n, Index vocab, std::uint64_t seed, Index max_positions = 40) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> dist(3, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> q(static_cast<std::size_t>(m)), d(static_cast<std::size_t>(n));
  for (auto& t : q) t = dist(rng);
  for (auto& t : d) t = dist(rng);
  return assemble_input(q, d, max_positions);
}

// Non-trivial norms and biases so every tensor carries gradient.
template <typename T>
void perturb_all(EncoderWeights<T>& w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.2, 0.2);
  w.visit([&](const std::string&, Matrix<T>& m) {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] += static_cast<T>(dist(rng));
  });
}

}  // namespace

TEST_CASE("vocabulary maps terms, specials and unknowns") {
  const auto vocab = Vocabulary::synthetic(5);
  CHECK(vocab.size() == 8);
  CHECK(vocab.id("[CLS]") == Vocabulary::kCls);
  CHECK(vocab.id("t0") == 3);
  CHECK(vocab.id("nope") == Vocabulary::kUnk);
  CHECK(vocab.encode("  t1 t4\tzz ") == std::vector<TokenId>{4, 7, Vocabulary::kUnk});
  CHECK(vocab.token(7) == "t4");
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"a b"}), std::invalid_argument);
}

TEST_CASE("assemble_input layout and partition") {
  const std::vector<TokenId> q{5, 6};
  const std::vector<TokenId> d{7, 8, 9};
  const auto seq = assemble_input(q, d, 64);
  CHECK(seq.length() == 8);
  CHECK(seq.ids == std::vector<TokenId>{0, 5, 6, 1, 7, 8, 9, 1});
  CHECK(seq.partition.cls.begin == 0);
  CHECK(seq.partition.cls.size == 1);
  CHECK(seq.partition.query.begin == 1);
  CHECK(seq.partition.query.size == 3);
  CHECK(seq.partition.document.begin == 4);
  CHECK(seq.partition.document.size == 4);
  CHECK(seq.truncated == 0);

  const auto empty_doc = assemble_input(q, {}, 64);
  CHECK(empty_doc.partition.document.size == 1);
  CHECK(empty_doc.ids.back() == Vocabulary::kSep);

  CHECK_THROWS_AS(assemble_input({}, d, 64), std::invalid_argument);
  CHECK_THROWS_AS(assemble_input(q, d, 4), std::invalid_argument);
}

TEST_CASE("assemble_input truncates the document tail only") {
  for (Index n = 4080; n <= 4090; ++n) {
    std::vector<TokenId> q(10, 4);
    std::vector<TokenId> d(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = static_cast<TokenId>(3 + i % 7);
    const auto seq = assemble_input(q, d, 4096);
    const Index kept = std::min<Index>(n, 4096 - 13);
    CHECK(seq.partition.document.size == kept + 1);
    CHECK(seq.truncated == n - kept);
    CHECK(seq.length() == 10 + kept + 3);
    for (Index i = 0; i < kept; ++i) CHECK(seq.ids[static_cast<std::size_t>(12 + i)] == d[static_cast<std::size_t>(i)]);
  }
  std::vector<TokenId> q(10, 4);
  std::vector<TokenId> d(4085, 5);
  CHECK(assemble_input(q, d, 4096).partition.document.size - 1 == 4083);
}

TEST_CASE("config validation") {
  auto c = small_config(PatternKind::sparse, Window::of(2));
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config(PatternKind::qds, Window::of(2));
  CHECK(c.attention_pattern().global_every() == 4);
  c.global_every = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("single-head full layer matches the dense reference layer") {
  auto c = small_config(PatternKind::full, Window::infinite(), 1);
  c.heads = 1;
  auto w = EncoderWeights<double>::initialize(c, 3);
  perturb_all(w, 4);
  const auto seq = random_sequence(3, 9, c.vocab_size, 5);
  const auto plan = AttentionPlan::build(seq.partition, c.attention_pattern());
  const Matrix<double> x = sce::testing::random_matrix(seq.length(), c.embed_dim, 6);
  const auto out = layer_forward<double>(x, plan, c, w.layers[0]);
  const auto mask = sce::testing::brute_force_mask(seq.partition, c.attention_pattern());
  const auto ref = sce::testing::dense_layer<double>(x, mask, 1, w.layers[0]);
  CHECK(max_rel_error(out, ref) <= 1e-10);
}

TEST_CASE("zero output projections reduce a layer to normalization") {
  auto c = small_config(PatternKind::sparse, Window::of(1), 1);
  auto w = EncoderWeights<double>::initialize(c, 8);
  auto& l = w.layers[0];
  l.wo.setZero();
  l.bo.setZero();
  l.w2.setZero();
  l.b2.setZero();
  const auto seq = random_sequence(2, 6, c.vocab_size, 9);
  const auto plan = AttentionPlan::build(seq.partition, c.attention_pattern());
  const Matrix<double> x = sce::testing::random_matrix(seq.length(), c.embed_dim, 10, 3.0);
  const auto out = layer_forward<double>(x, plan, c, l);
  const auto once = sce::testing::dense_layer_norm<double>(x, l.ln1_gain, l.ln1_bias);
  const auto twice = sce::testing::dense_layer_norm<double>(once, l.ln2_gain, l.ln2_bias);
  CHECK(max_rel_error(out, twice) <= 1e-12);
  // The second normalization of an already normalized row only moves it by eps.
  CHECK(max_rel_error(out, once) <= 1e-4);
}

TEST_CASE("encoder output equals the dense masked encoder for every pattern") {
  for (auto kind : {PatternKind::full, PatternKind::longformer, PatternKind::qds, PatternKind::sparse}) {
    for (std::size_t w : {0u, 1u, 4u}) {
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto c = small_config(kind, Window::of(w));
        auto weights = EncoderWeights<double>::initialize(c, 100 + seed);
        perturb_all(weights, 200 + seed);
        const auto seq = random_sequence(2 + static_cast<Index>(seed), 10 + 6 * static_cast<Index>(seed),
                                         c.vocab_size, 300 + seed);
        const auto out = encoder_forward(seq, c, weights);
        const auto ref = sce::testing::dense_encoder(seq, c, weights);
        INFO(to_string(kind), " w=", w, " seed=", seed);
        CHECK(max_rel_error(out, ref) <= 1e-8);
      }
    }
  }
}

TEST_CASE("zero-layer encoder returns the embedded input") {
  const auto c = small_config(PatternKind::sparse, Window::of(2), 0);
  const auto w = EncoderWeights<double>::initialize(c, 1);
  const auto seq = random_sequence(3, 4, c.vocab_size, 2);
  const auto out = encoder_forward(seq, c, w);
  for (Index i = 0; i < seq.length(); ++i)
    CHECK(out.row(i) == w.token_embedding.row(seq.ids[static_cast<std::size_t>(i)]) + w.position_embedding.row(i));
}

TEST_CASE("unbounded longformer equals the full pattern") {
  auto full = small_config(PatternKind::full, Window::infinite());
  auto lf = small_config(PatternKind::longformer, Window::infinite());
  const auto w = EncoderWeights<double>::initialize(full, 12);
  const auto seq = random_sequence(4, 15, full.vocab_size, 13);
  CHECK(max_rel_error(encoder_forward(seq, lf, w), encoder_forward(seq, full, w)) <= 1e-12);
}

TEST_CASE("sparse pattern: query rows ignore the document end to end") {
  const auto c = small_config(PatternKind::sparse, Window::of(1), 3);
  const auto w = EncoderWeights<double>::initialize(c, 21);
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<TokenId> tok(3, static_cast<TokenId>(c.vocab_size - 1));
  const std::vector<TokenId> q{4, 9, 11};
  std::vector<TokenId> d(12);
  for (auto& t : d) t = tok(rng);
  const auto base = encoder_forward(assemble_input(q, d, c.max_positions), c, w);
  const auto qr = assemble_input(q, d, c.max_positions).partition.query;
  for (int trial = 0; trial < 20; ++trial) {
    for (auto& t : d) t = tok(rng);
    const auto other = encoder_forward(assemble_input(q, d, c.max_positions), c, w);
    CHECK(other.middleRows(qr.begin, qr.size) == base.middleRows(qr.begin, qr.size));
  }
}

TEST_CASE("sparse layer: query rows ignore document embeddings") {
  const auto c = small_config(PatternKind::sparse, Window::of(2), 1);
  const auto w = EncoderWeights<double>::initialize(c, 31);
  const auto seq = random_sequence(3, 8, c.vocab_size, 32);
  const auto plan = AttentionPlan::build(seq.partition, c.attention_pattern());
  Matrix<double> x = sce::testing::random_matrix(seq.length(), c.embed_dim, 33);
  const auto base = layer_forward<double>(x, plan, c, w.layers[0]);
  const auto& d = seq.partition.document;
  x.middleRows(d.begin, d.size) = sce::testing::random_matrix(d.size, c.embed_dim, 34, 5.0);
  x.row(0) = sce::testing::random_matrix(1, c.embed_dim, 35);
  const auto other = layer_forward<double>(x, plan, c, w.layers[0]);
  const auto& qr = seq.partition.query;
  CHECK(other.middleRows(qr.begin, qr.size) == base.middleRows(qr.begin, qr.size));
  CHECK(other.row(0) != base.row(0));
}

TEST_CASE("relevance head") {
  const Matrix<double> last = sce::testing::random_matrix(5, 4, 40);
  CHECK(relevance_score<double>(last, Matrix<double>::Zero(1, 4), Matrix<double>::Zero(1, 1)) == 0.0);
  for (Index k = 0; k < 4; ++k) {
    Matrix<double> unit = Matrix<double>::Zero(1, 4);
    unit(0, k) = 1;
    CHECK(relevance_score<double>(last, unit, Matrix<double>::Zero(1, 1)) == last(0, k));
  }
  const Matrix<double> hw = sce::testing::random_matrix(1, 4, 41);
  Matrix<double> hb(1, 1);
  hb << 0.25;
  double expected = 0.25;
  for (Index k = 0; k < 4; ++k) expected += hw(0, k) * last(0, k);
  CHECK(relevance_score<double>(last, hw, hb) == doctest::Approx(expected).epsilon(1e-15));
  CHECK_THROWS_AS(relevance_score<double>(last, Matrix<double>::Zero(1, 3), hb), std::invalid_argument);
}

TEST_CASE("position interpolation") {
  const Matrix<double> old = sce::testing::random_matrix(3, 4, 50);
  CHECK(interpolate_positions<double>(old, 3) == old);
  const auto up = interpolate_positions<double>(old, 5);
  CHECK(up.row(0) == old.row(0));
  CHECK(up.row(4) == old.row(2));
  CHECK(max_rel_error(up.row(1), 0.5 * old.row(0) + 0.5 * old.row(1)) <= 1e-15);
  CHECK(max_rel_error(up.row(2), old.row(1)) <= 1e-15);
  const Matrix<double> big = sce::testing::random_matrix(512, 3, 51);
  const auto stretched = interpolate_positions<double>(big, 4096);
  CHECK(stretched.row(4095) == big.row(511));
  CHECK_THROWS_AS(interpolate_positions<double>(old, 1), std::invalid_argument);
  CHECK_THROWS_AS(interpolate_positions<double>(old.topRows(1), 4), std::invalid_argument);
}

TEST_CASE("scores are bitwise deterministic") {
  const auto c = small_config(PatternKind::qds, Window::of(2));
  const auto a = Model<double>::initialize(c, 60);
  const auto b = Model<double>::initialize(c, 60);
  const auto seq = random_sequence(3, 20, c.vocab_size, 61);
  CHECK(score_sequence(seq, a) == score_sequence(seq, b));
  const auto other = Model<double>::initialize(c, 62);
  CHECK(score_sequence(seq, a) != score_sequence(seq, other));
}

TEST_CASE("model weights are charged to the ledger") {
  const auto c = small_config(PatternKind::sparse, Window::of(2));
  const auto before = mem::snapshot().current_of(mem::Category::weights);
  {
    const auto m = Model<float>::initialize(c, 1);
    CHECK(mem::snapshot().current_of(mem::Category::weights) - before ==
          m.weights.parameter_count() * static_cast<std::int64_t>(sizeof(float)));
  }
  CHECK(mem::snapshot().current_of(mem::Category::weights) == before);
}

TEST_CASE("errors: vocabulary range, length, non-finite activations") {
  const auto c = small_config(PatternKind::sparse, Window::of(2));
  auto w = EncoderWeights<double>::initialize(c, 70);
  auto seq = random_sequence(2, 5, c.vocab_size, 71);
  seq.ids[2] = static_cast<TokenId>(c.vocab_size);
  CHECK_THROWS_AS(encoder_forward(seq, c, w), std::out_of_range);
  CHECK_THROWS_AS(encoder_forward(random_sequence(2, 50, c.vocab_size, 72, 80), c, w), std::invalid_argument);

  w.layers[1].w1(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    encoder_forward(random_sequence(2, 5, c.vocab_size, 73), c, w);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("single precision agrees with double") {
  const auto c = small_config(PatternKind::longformer, Window::of(2));
  const auto wd = EncoderWeights<double>::initialize(c, 80);
  EncoderWeights<float> wf;
  wf.token_embedding = wd.token_embedding.cast<float>();
  wf.position_embedding = wd.position_embedding.cast<float>();
  wf.head_weight = wd.head_weight.cast<float>();
  wf.head_bias = wd.head_bias.cast<float>();
  for (const auto& l : wd.layers) {
    LayerWeights<float> lf;
    std::vector<Matrix<float>*> dst;
    lf.visit("", [&](const std::string&, Matrix<float>& m) { dst.push_back(&m); });
    std::size_t i = 0;
    l.visit("", [&](const std::string&, const Matrix<double>& m) { *dst[i++] = m.cast<float>(); });
    wf.layers.push_back(std::move(lf));
  }
  const auto seq = random_sequence(3, 12, c.vocab_size, 81);
  CHECK(max_rel_error(encoder_forward(seq, c, wf), encoder_forward(seq, c, wd)) <= 1e-4);
}

TEST_CASE("score gradient matches central differences for every tensor") {
  for (auto kind : {PatternKind::full, PatternKind::longformer, PatternKind::qds, PatternKind::sparse}) {
    auto c = small_config(kind, Window::of(1));
    auto w = EncoderWeights<double>::initialize(c, 90);
    perturb_all(w, 91);
    const auto seq = random_sequence(3, 11, c.vocab_size, 92);

    ForwardCache<double> cache;
    encoder_forward(seq, c, w, {}, &cache);
    auto grads = w.zeros_like();
    score_backward(cache, c, w, 1.0, grads);

    auto score = [&] {
      const auto last = encoder_forward(seq, c, w);
      return relevance_score<double>(last, w.head_weight, w.head_bias);
    };
    std::vector<Matrix<double>*> grad_tensors;
    grads.visit([&](const std::string&, Matrix<double>& m) { grad_tensors.push_back(&m); });
    std::size_t t = 0;
    double worst = 0;
    std::mt19937_64 rng(93);
    w.visit([&](const std::string& name, Matrix<double>& m) {
      const auto& g = *grad_tensors[t++];
      std::uniform_int_distribution<Index> pick(0, m.size() - 1);
      for (int k = 0; k < 6; ++k) {
        const Index idx = pick(rng);
        const double numeric = sce::testing::central_difference(m.data() + idx, 1e-4, score);
        const double err = sce::testing::scalar_rel_error(g.data()[idx], numeric);
        INFO(to_string(kind), " ", name, "[", idx, "] analytic=", g.data()[idx], " numeric=", numeric);
        CHECK(err < 1e-4);
        worst = std::max(worst, err);
      }
    });
    MESSAGE(to_string(kind), " worst relative gradient error ", worst);
  }
}
