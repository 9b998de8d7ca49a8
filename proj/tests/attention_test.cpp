// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <limits>

#include "oracle.hpp"
#include "sce/attention.hpp"
#include "sce/pattern.hpp"
#include "support.hpp"

using namespace sce;
using sce::testing::max_rel_error;
using sce::testing::random_matrix;

namespace {

SegmentScores<double> dense_segments(std::initializer_list<Matrix<double>> blocks) {
  SegmentScores<double> s;
  for (const auto& b : blocks) {
    DenseScores<double> d(b.rows(), b.cols());
    d.values = b;
    s.segments.push_back({std::move(d), {}});
  }
  return s;
}

double row_sum(const SegmentScores<double>& p, Index i) {
  double total = 0;
  for (const auto& seg : p.segments) total += seg.is_band() ? seg.band().values().row(i).sum() : seg.dense().row(i).sum();
  return total;
}

}  // namespace

TEST_CASE("segment_softmax: symmetric inputs give uniform rows") {
  const auto one = segment_softmax(dense_segments({Matrix<double>::Constant(3, 4, 0.7)}), 2.0);
  CHECK(one.segments[0].dense().isApproxToConstant(0.25, 1e-15));

  const auto two = segment_softmax(dense_segments({Matrix<double>::Zero(2, 2), Matrix<double>::Zero(2, 3)}), 1.0);
  CHECK(two.segments[0].dense().isApproxToConstant(0.2, 1e-15));
  CHECK(two.segments[1].dense().isApproxToConstant(0.2, 1e-15));
}

TEST_CASE("segment_softmax: equals dense softmax over the concatenation with -inf padding") {
  const auto a_dense = random_matrix(6, 4, 1, 3.0);
  const auto band_src = random_matrix(6, 6, 2, 3.0);
  SegmentScores<double> scores = dense_segments({a_dense});
  scores.segments.push_back({dense_to_band(band_src, 1), {}});
  const double scale = 1.7;
  const auto probs = segment_softmax(std::move(scores), scale);

  for (Index i = 0; i < 6; ++i) {
    std::vector<double> logits;
    for (Index c = 0; c < 4; ++c) logits.push_back(a_dense(i, c) / scale);
    for (Index c = 0; c < 6; ++c)
      logits.push_back(std::abs(c - i) <= 1 ? band_src(i, c) / scale : -std::numeric_limits<double>::infinity());
    double denom = 0;
    for (double x : logits) denom += std::exp(x);
    for (Index c = 0; c < 4; ++c) CHECK(std::abs(probs.segments[0].dense()(i, c) - std::exp(logits[c]) / denom) < 1e-15);
    const auto expanded = band_to_dense(probs.segments[1].band(), 6, 0.0);
    for (Index c = 0; c < 6; ++c) CHECK(std::abs(expanded(i, c) - std::exp(logits[4 + c]) / denom) < 1e-15);
    CHECK(std::abs(row_sum(probs, i) - 1.0) < 1e-12);
  }
  const auto& band = probs.segments[1].band();
  for (Index i = 0; i < band.rows(); ++i)
    for (Index j = 0; j < band.width(); ++j)
      if (!band.valid(i, j)) CHECK(band(i, j) == 0.0);
}

TEST_CASE("segment_softmax: excluded keys and rejected rows") {
  SegmentScores<double> s = dense_segments({Matrix<double>::Zero(2, 3)});
  s.segments[0].key_excluded = {true, false, true};
  const auto p = segment_softmax(std::move(s), 1.0);
  CHECK(p.segments[0].dense()(0, 0) == 0.0);
  CHECK(p.segments[0].dense()(0, 1) == 1.0);

  SegmentScores<double> dead = dense_segments({Matrix<double>::Zero(2, 2)});
  dead.segments[0].key_excluded = {true, true};
  CHECK_THROWS_AS(segment_softmax(std::move(dead), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(segment_softmax(dense_segments({Matrix<double>::Zero(1, 1)}), 0.0), std::invalid_argument);
}

TEST_CASE("segment_softmax: zero-logit padding keeps padded slots in the normalizer") {
  SegmentScores<double> s;
  s.segments.push_back({BandMatrix<double>(3, 3, 1), {}});
  const auto p = segment_softmax(std::move(s), 1.0, PaddingMode::zero_logit);
  const auto& band = p.segments[0].band();
  // Row 0 and row 2 each have one padded slot: 2 live entries of 1/3.
  CHECK(band(0, 1) == doctest::Approx(1.0 / 3));
  CHECK(band(0, 0) == 0.0);
  CHECK(band(1, 1) == doctest::Approx(1.0 / 3));
  CHECK(band(2, 1) == doctest::Approx(1.0 / 3));
}

TEST_CASE("full_attention: limits and independent reimplementation") {
  Matrix<double> k = Matrix<double>::Identity(4, 4);
  const auto v = random_matrix(4, 3, 5);
  const Matrix<double> q = 200.0 * k.row(2);
  CHECK(max_rel_error(full_attention(q, k, v), v.row(2)) < 1e-12);

  const auto kr = random_matrix(5, 4, 6);
  const auto vr = random_matrix(5, 3, 7);
  const Matrix<double> mean = vr.colwise().mean();
  CHECK(max_rel_error(full_attention(Matrix<double>::Zero(2, 4), kr, vr).row(1), mean) < 1e-14);

  const auto qq = random_matrix(6, 4, 8);
  const auto kk = random_matrix(6, 4, 9);
  const auto vv = random_matrix(6, 4, 10);
  std::vector<std::vector<bool>> all(6, std::vector<bool>(6, true));
  CHECK(max_rel_error(full_attention(qq, kk, vv), sce::testing::dense_masked_attention(qq, kk, vv, all)) < 1e-13);
  CHECK_THROWS_AS(full_attention(qq, random_matrix(6, 3, 1), vv), std::invalid_argument);
}

TEST_CASE("windowed_cross_attention: single unbounded segment is full attention") {
  const auto q = random_matrix(5, 4, 11);
  const auto k = random_matrix(7, 4, 12);
  const auto v = random_matrix(7, 4, 13);
  const std::vector<KeyValue<double>> kv{key_value<double>(k, v, Window::infinite())};
  CHECK(max_rel_error(windowed_cross_attention<double>(q, kv), full_attention(q, k, v)) < 1e-14);
}

TEST_CASE("windowed_cross_attention: errors") {
  const auto q = random_matrix(3, 4, 1);
  const auto k = random_matrix(3, 3, 2);
  std::vector<KeyValue<double>> none;
  CHECK_THROWS_AS(windowed_cross_attention<double>(q, none), std::invalid_argument);
  const std::vector<KeyValue<double>> bad{key_value<double>(k, k, Window::infinite())};
  CHECK_THROWS_AS(windowed_cross_attention<double>(q, bad), std::invalid_argument);
}

TEST_CASE("windowed_cross_attention: document rows of the sparse layout (C inf, Q inf, D w)") {
  const auto partition = SubsequencePartition::for_lengths(3, 5);  // s = 11
  const Index s = partition.total();
  const auto q = random_matrix(s, 4, 21);
  const auto k = random_matrix(s, 4, 22);
  const auto v = random_matrix(s, 4, 23);
  const auto& c = partition.cls;
  const auto& qr = partition.query;
  const auto& d = partition.document;
  for (std::size_t w : {0u, 1u, 2u}) {
    const std::vector<KeyValue<double>> kv{
        key_value<double>(k.middleRows(c.begin, c.size), v.middleRows(c.begin, c.size), Window::infinite()),
        key_value<double>(k.middleRows(qr.begin, qr.size), v.middleRows(qr.begin, qr.size), Window::infinite()),
        key_value<double>(k.middleRows(d.begin, d.size), v.middleRows(d.begin, d.size), Window::of(w))};
    const Matrix<double> q_doc = q.middleRows(d.begin, d.size);
    const auto o_d = windowed_cross_attention<double>(q_doc, kv);
    const auto mask = sce::testing::brute_force_mask(partition, AttentionPattern::sparse(Window::of(w)));
    const Matrix<double> expected = sce::testing::dense_masked_attention(q, k, v, mask).middleRows(d.begin, d.size);
    CHECK(max_rel_error(o_d, expected) < 1e-13);
  }
}

TEST_CASE("windowed_cross_attention: random three-segment instances match dense masked attention") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    const Index rows = pick(1, 10);
    const Index h = pick(1, 6);
    const Index l1 = pick(1, 4), l2 = pick(1, 6), l3 = rows;
    const std::size_t w = static_cast<std::size_t>(pick(0, 4));
    const auto q = random_matrix(rows, h, seed * 7 + 1);
    const auto k = random_matrix(l1 + l2 + l3, h, seed * 7 + 2);
    const auto v = random_matrix(l1 + l2 + l3, h, seed * 7 + 3);
    const std::vector<KeyValue<double>> kv{
        key_value<double>(k.topRows(l1), v.topRows(l1), Window::infinite()),
        key_value<double>(k.middleRows(l1, l2), v.middleRows(l1, l2), Window::infinite()),
        key_value<double>(k.bottomRows(l3), v.bottomRows(l3), Window::of(w))};
    std::vector<std::vector<bool>> mask(rows, std::vector<bool>(l1 + l2 + l3, true));
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < l3; ++j) mask[i][l1 + l2 + j] = std::abs(i - j) <= static_cast<Index>(w);
    CHECK(max_rel_error(windowed_cross_attention<double>(q, kv), sce::testing::dense_masked_attention(q, k, v, mask)) <
          1e-12);
  }
}

TEST_CASE("windowed_cross_attention_backward: finite differences") {
  Matrix<double> q = random_matrix(6, 3, 31);
  Matrix<double> k1 = random_matrix(2, 3, 32), v1 = random_matrix(2, 3, 33);
  Matrix<double> k2 = random_matrix(6, 3, 34), v2 = random_matrix(6, 3, 35);
  const std::vector<bool> excluded{false, false, true, false, false, false};
  const auto r = random_matrix(6, 3, 36);
  auto kv = [&] {
    return std::vector<KeyValue<double>>{key_value<double>(k1, v1, Window::infinite()),
                                         key_value<double>(k2, v2, Window::of(1), &excluded)};
  };
  auto loss = [&] {
    const auto list = kv();
    return windowed_cross_attention<double>(q, list).cwiseProduct(r).sum();
  };
  const auto list = kv();
  const auto fwd = windowed_cross_attention_forward<double>(q, list);
  const auto g = windowed_cross_attention_backward<double>(r, q, list, fwd.probs);
  auto check_all = [&](Matrix<double>& x, const Matrix<double>& gx) {
    for (Index i = 0; i < x.size(); ++i) {
      const double fd = sce::testing::central_difference(x.data() + i, 1e-6, loss);
      CHECK(sce::testing::scalar_rel_error(gx.data()[i], fd, 1e-9) < 1e-6);
    }
  };
  check_all(q, g.q);
  check_all(k1, g.k[0]);
  check_all(v1, g.v[0]);
  check_all(k2, g.k[1]);
  check_all(v2, g.v[1]);
  CHECK(g.k[1].row(2).isZero(0));
  CHECK(g.v[1].row(2).isZero(0));
}

TEST_CASE("patterns: factories and validation") {
  CHECK(AttentionPattern::sparse(Window::of(4)).targets(Group::query).size() == 1);
  CHECK(!AttentionPattern::sparse(Window::of(4)).targets_group(Group::query, Group::document));
  CHECK(AttentionPattern::longformer(Window::of(4)).targets_group(Group::query, Group::document));
  CHECK(AttentionPattern::qds(Window::of(4)).globals_for(120).size() == 4);
  CHECK(AttentionPattern::qds(Window::of(4)).globals_for(29).empty());
  CHECK(parse_pattern_kind("qds") == PatternKind::qds);
  CHECK_THROWS_AS(parse_pattern_kind("bigbird"), std::invalid_argument);

  AttentionPattern dup = AttentionPattern::full();
  dup.targets(Group::query).push_back({Group::cls, Window::infinite()});
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
  AttentionPattern empty = AttentionPattern::full();
  empty.targets(Group::cls).clear();
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
}

TEST_CASE("apply_pattern: sparse query rows ignore documents and [CLS] bit for bit") {
  const auto partition = SubsequencePartition::for_lengths(4, 9);
  const Index s = partition.total();
  Matrix<double> q = random_matrix(s, 4, 41), k = random_matrix(s, 4, 42), v = random_matrix(s, 4, 43);
  const auto pattern = AttentionPattern::sparse(Window::of(1));
  const auto base = apply_pattern(partition, q, k, v, pattern);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix<double> q2 = q, k2 = k, v2 = v;
    const auto noise = random_matrix(partition.document.size + 1, 4, 100 + trial, 5.0);
    k2.bottomRows(partition.document.size) = noise.bottomRows(partition.document.size);
    v2.bottomRows(partition.document.size) = noise.topRows(partition.document.size);
    k2.row(0) = noise.row(0);
    q2.row(0) = noise.row(1);
    const auto out = apply_pattern(partition, q2, k2, v2, pattern);
    CHECK((out.query.array() == base.query.array()).all());
  }
}

TEST_CASE("apply_pattern: full pattern equals attention over the undivided sequence") {
  const auto partition = SubsequencePartition::for_lengths(3, 7);
  const Index s = partition.total();
  const auto q = random_matrix(s, 5, 51), k = random_matrix(s, 5, 52), v = random_matrix(s, 5, 53);
  CHECK(max_rel_error(apply_pattern(partition, q, k, v, AttentionPattern::full()).stacked(), full_attention(q, k, v)) <
        1e-13);
}

TEST_CASE("apply_pattern: longformer s=12 w=1 matches the brute-force mask") {
  const auto partition = SubsequencePartition::for_lengths(2, 7);
  REQUIRE(partition.total() == 12);
  const auto q = random_matrix(12, 4, 61), k = random_matrix(12, 4, 62), v = random_matrix(12, 4, 63);
  const auto pattern = AttentionPattern::longformer(Window::of(1));
  const auto mask = sce::testing::brute_force_mask(partition, pattern);
  CHECK(max_rel_error(apply_pattern(partition, q, k, v, pattern).stacked(),
                      sce::testing::dense_masked_attention(q, k, v, mask)) < 1e-12);
}

TEST_CASE("apply_pattern: every pattern matches its brute-force mask") {
  for (Index m = 1; m <= 3; ++m) {
    for (Index n = 0; n <= 11; n += 1) {
      const auto partition = SubsequencePartition::for_lengths(m, n);
      const Index s = partition.total();
      if (s > 16) continue;
      const auto q = random_matrix(s, 3, 70 + s), k = random_matrix(s, 3, 80 + s), v = random_matrix(s, 3, 90 + s);
      for (std::size_t w = 0; w <= 4; ++w) {
        AttentionPattern qds = AttentionPattern::qds(Window::of(w), 4);
        for (const auto& pattern : {AttentionPattern::full(), AttentionPattern::longformer(Window::of(w)),
                                    AttentionPattern::sparse(Window::of(w)), qds}) {
          const auto mask = sce::testing::brute_force_mask(partition, pattern);
          CHECK(max_rel_error(apply_pattern(partition, q, k, v, pattern).stacked(),
                              sce::testing::dense_masked_attention(q, k, v, mask)) < 1e-10);
        }
      }
    }
  }
}

TEST_CASE("apply_pattern: unbounded sparse with a full query reproduces the full pattern exactly") {
  const auto partition = SubsequencePartition::for_lengths(3, 6);
  const Index s = partition.total();
  const auto q = random_matrix(s, 4, 101), k = random_matrix(s, 4, 102), v = random_matrix(s, 4, 103);
  AttentionPattern widened = AttentionPattern::sparse(Window::infinite());
  widened.targets(Group::query) = AttentionPattern::full().targets(Group::query);
  const auto a = apply_pattern(partition, q, k, v, widened).stacked();
  const auto b = apply_pattern(partition, q, k, v, AttentionPattern::full()).stacked();
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("apply_pattern: permuting documents permutes outputs under an unbounded window") {
  const auto partition = SubsequencePartition::for_lengths(2, 6);
  const Index s = partition.total();
  const auto q = random_matrix(s, 4, 111), k = random_matrix(s, 4, 112), v = random_matrix(s, 4, 113);
  const auto pattern = AttentionPattern::sparse(Window::infinite());
  std::vector<Index> perm{3, 0, 5, 1, 6, 2, 4};
  Matrix<double> qp = q, kp = k, vp = v;
  const Index d0 = partition.document.begin;
  for (Index i = 0; i < 7; ++i) {
    qp.row(d0 + i) = q.row(d0 + perm[i]);
    kp.row(d0 + i) = k.row(d0 + perm[i]);
    vp.row(d0 + i) = v.row(d0 + perm[i]);
  }
  const auto base = apply_pattern(partition, q, k, v, pattern).document;
  const auto permuted = apply_pattern(partition, qp, kp, vp, pattern).document;
  for (Index i = 0; i < 7; ++i) CHECK(max_rel_error(permuted.row(i), base.row(perm[i])) < 1e-13);
}

TEST_CASE("attend_head_backward: finite differences for every pattern") {
  const auto partition = SubsequencePartition::for_lengths(2, 9);
  const Index s = partition.total();
  const auto r = random_matrix(s, 3, 120);
  for (const auto& pattern : {AttentionPattern::full(), AttentionPattern::longformer(Window::of(1)),
                              AttentionPattern::qds(Window::of(1), 3), AttentionPattern::sparse(Window::of(2))}) {
    Matrix<double> q = random_matrix(s, 3, 121), k = random_matrix(s, 3, 122), v = random_matrix(s, 3, 123);
    const auto plan = AttentionPlan::build(partition, pattern);
    auto loss = [&] { return attend_head<double>(plan, q, k, v, {}).cwiseProduct(r).sum(); };
    HeadAttentionCache<double> cache;
    attend_head<double>(plan, q, k, v, {}, &cache);
    const auto g = attend_head_backward<double>(plan, q, k, v, cache, r, {});
    for (auto [x, gx] : {std::pair{&q, &g.q}, {&k, &g.k}, {&v, &g.v}}) {
      for (Index i = 0; i < x->size(); ++i) {
        const double fd = sce::testing::central_difference(x->data() + i, 1e-6, loss);
        CHECK(sce::testing::scalar_rel_error(gx->data()[i], fd, 1e-9) < 1e-6);
      }
    }
  }
}

TEST_CASE("apply_pattern: rejects mismatched inputs") {
  const auto partition = SubsequencePartition::for_lengths(2, 3);
  const auto q = random_matrix(5, 2, 1);
  CHECK_THROWS_AS(apply_pattern(partition, q, q, q, AttentionPattern::full()), std::invalid_argument);
}
