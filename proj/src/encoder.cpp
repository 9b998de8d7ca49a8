// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/encoder.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "sce/flops.hpp"

namespace sce {

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& terms) {
  tokens_ = {"[CLS]", "[SEP]", "[UNK]"};
  tokens_.insert(tokens_.end(), terms.begin(), terms.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\r\n") != std::string::npos)
      throw std::invalid_argument("vocabulary: terms must be non-empty and contain no whitespace");
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw std::invalid_argument("vocabulary: duplicate term '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::synthetic(std::size_t count) {
  std::vector<std::string> terms;
  terms.reserve(count);
  for (std::size_t i = 0; i < count; ++i) terms.push_back("t" + std::to_string(i));
  return Vocabulary(terms);
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) ids.push_back(id(word));
  return ids;
}

TokenSequence assemble_input(std::span<const TokenId> query, std::span<const TokenId> document, Index max_positions) {
  const auto m = static_cast<Index>(query.size());
  if (m < 1) throw std::invalid_argument("assemble_input: query must hold at least one token");
  if (m + 3 > max_positions)
    throw std::invalid_argument("assemble_input: query of " + std::to_string(m) + " tokens does not fit " +
                                std::to_string(max_positions) + " positions");
  const auto n_in = static_cast<Index>(document.size());
  const Index n = std::min(n_in, max_positions - m - 3);

  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(m + n + 3));
  seq.ids.push_back(Vocabulary::kCls);
  seq.ids.insert(seq.ids.end(), query.begin(), query.end());
  seq.ids.push_back(Vocabulary::kSep);
  seq.ids.insert(seq.ids.end(), document.begin(), document.begin() + n);
  seq.ids.push_back(Vocabulary::kSep);
  seq.partition = SubsequencePartition::for_lengths(m, n);
  seq.truncated = n_in - n;
  return seq;
}

AttentionPattern EncoderConfig::attention_pattern() const {
  auto p = AttentionPattern::make(pattern, window);
  if (pattern == PatternKind::qds) p.set_global_every(global_every);
  return p;
}

void EncoderConfig::validate() const {
  if (layers < 0) throw std::invalid_argument("config: layers must be >= 0");
  if (embed_dim < 1 || heads < 1 || ff_dim < 1) throw std::invalid_argument("config: dimensions must be positive");
  if (embed_dim % heads != 0)
    throw std::invalid_argument("config: embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                                std::to_string(heads));
  if (max_positions < 4) throw std::invalid_argument("config: max_positions must be >= 4");
  if (vocab_size < 3) throw std::invalid_argument("config: vocab_size must cover the special tokens");
  if (pattern == PatternKind::custom) throw std::invalid_argument("config: custom patterns cannot be configured");
  if (pattern == PatternKind::qds && global_every == 0) throw std::invalid_argument("config: global_every must be > 0");
}

template <typename T>
std::int64_t EncoderWeights<T>::parameter_count() const {
  std::int64_t n = 0;
  visit([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
  return n;
}

template <typename T>
EncoderWeights<T> EncoderWeights<T>::zeros_like() const {
  EncoderWeights out = *this;
  out.set_zero();
  return out;
}

template <typename T>
void EncoderWeights<T>::set_zero() {
  visit([](const std::string&, Matrix<T>& m) { m.setZero(); });
}

template <typename T>
void EncoderWeights<T>::add(const EncoderWeights& other) {
  std::vector<const Matrix<T>*> rhs;
  other.visit([&](const std::string&, const Matrix<T>& m) { rhs.push_back(&m); });
  std::size_t i = 0;
  visit([&](const std::string& name, Matrix<T>& m) {
    if (i >= rhs.size() || rhs[i]->rows() != m.rows() || rhs[i]->cols() != m.cols())
      throw std::invalid_argument("weights: shape mismatch at " + name);
    m += *rhs[i++];
  });
  if (i != rhs.size()) throw std::invalid_argument("weights: tensor count mismatch");
}

template <typename T>
void EncoderWeights<T>::scale(T factor) {
  visit([&](const std::string&, Matrix<T>& m) { m *= factor; });
}

namespace {

template <typename T>
Matrix<T> uniform(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

}  // namespace

template <typename T>
EncoderWeights<T> EncoderWeights<T>::initialize(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Index h = config.embed_dim;
  const Index ff = config.ff_dim;
  const double bh = 1.0 / std::sqrt(static_cast<double>(h));
  const double bf = 1.0 / std::sqrt(static_cast<double>(ff));

  EncoderWeights w;
  // Unit-variance token vectors; positions start small so content dominates.
  w.token_embedding = uniform<T>(config.vocab_size, h, std::sqrt(3.0), rng);
  w.position_embedding = uniform<T>(config.max_positions, h, 0.1, rng);
  for (Index l = 0; l < config.layers; ++l) {
    LayerWeights<T> lw;
    lw.wq = uniform<T>(h, h, bh, rng);
    lw.wk = uniform<T>(h, h, bh, rng);
    lw.wv = uniform<T>(h, h, bh, rng);
    lw.wo = uniform<T>(h, h, bh, rng);
    lw.bq = lw.bk = lw.bv = lw.bo = Matrix<T>::Zero(1, h);
    lw.ln1_gain = lw.ln2_gain = Matrix<T>::Ones(1, h);
    lw.ln1_bias = lw.ln2_bias = Matrix<T>::Zero(1, h);
    lw.w1 = uniform<T>(h, ff, bh, rng);
    lw.b1 = Matrix<T>::Zero(1, ff);
    lw.w2 = uniform<T>(ff, h, bf, rng);
    lw.b2 = Matrix<T>::Zero(1, h);
    w.layers.push_back(std::move(lw));
  }
  w.head_weight = uniform<T>(1, h, bh, rng);
  w.head_bias = Matrix<T>::Zero(1, 1);
  return w;
}

template <typename T>
Model<T>::Model(EncoderConfig c, EncoderWeights<T> w) : config(std::move(c)), weights(std::move(w)) {
  config.validate();
  if (weights.token_embedding.rows() != config.vocab_size || weights.token_embedding.cols() != config.embed_dim ||
      weights.position_embedding.rows() != config.max_positions ||
      static_cast<Index>(weights.layers.size()) != config.layers)
    throw std::invalid_argument("model: weights do not match the configuration");
  ticket = mem::ticket_for<T>(mem::Category::weights, weights.parameter_count());
}

template <typename T>
Model<T> Model<T>::initialize(const EncoderConfig& config, std::uint64_t seed) {
  return Model(config, EncoderWeights<T>::initialize(config, seed));
}

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

// Row-wise layer norm; returns normalized rows and stores xhat and 1/std.
template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>* xhat,
                     std::vector<T>* rstd) {
  const Index n = x.cols();
  Matrix<T> out(x.rows(), n);
  if (xhat) xhat->resize(x.rows(), n);
  if (rstd) rstd->resize(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    const RowVector<T> xh = (x.row(i).array() - mean) * r;
    out.row(i) = xh.cwiseProduct(gain.row(0)) + bias.row(0);
    if (xhat) xhat->row(i) = xh;
    if (rstd) (*rstd)[static_cast<std::size_t>(i)] = r;
  }
  return out;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& grad_out, const Matrix<T>& xhat, const std::vector<T>& rstd,
                              const Matrix<T>& gain, Matrix<T>& grad_gain, Matrix<T>& grad_bias) {
  const Index n = xhat.cols();
  grad_gain += grad_out.cwiseProduct(xhat).colwise().sum();
  grad_bias += grad_out.colwise().sum();
  Matrix<T> grad_in(xhat.rows(), n);
  for (Index i = 0; i < xhat.rows(); ++i) {
    const RowVector<T> dxh = grad_out.row(i).cwiseProduct(gain.row(0));
    const T sum = dxh.sum();
    const T dot = dxh.dot(xhat.row(i));
    grad_in.row(i) = (rstd[static_cast<std::size_t>(i)] / static_cast<T>(n)) *
                     (static_cast<T>(n) * dxh.array() - sum - xhat.row(i).array() * dot).matrix();
  }
  return grad_in;
}

template <typename T>
Matrix<T> affine(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  flops::add_product(x.rows(), w.cols(), x.cols());
  return (x * w).rowwise() + b.row(0);
}

AttentionOptions attention_options(const EncoderConfig& config, const ForwardOptions& options) {
  AttentionOptions o;
  o.padding = config.padding;
  o.kernel = options.kernel;
  return o;
}

}  // namespace

template <typename T>
Matrix<T> layer_forward(ConstRef<T> x, const AttentionPlan& plan, const EncoderConfig& config,
                        const LayerWeights<T>& w, const ForwardOptions& options, LayerCache<T>* cache,
                        Index layer_index) {
  const Index s = x.rows();
  const Index h = config.embed_dim;
  const Index d = config.head_dim();
  if (x.cols() != h) throw std::invalid_argument("layer_forward: embedding width differs from embed_dim");
  if (s != plan.partition.total()) throw std::invalid_argument("layer_forward: sequence length differs from the plan");

  // q, k, v, head outputs, two residual streams and the feed-forward pair.
  const auto activations = mem::ticket_for<T>(mem::Category::activations, s * (6 * h + 2 * config.ff_dim));

  const Matrix<T> input = x;
  Matrix<T> q = affine<T>(input, w.wq, w.bq);
  Matrix<T> k = affine<T>(input, w.wk, w.bk);
  Matrix<T> v = affine<T>(input, w.wv, w.bv);

  const auto opts = attention_options(config, options);
  Matrix<T> heads(s, h);
  if (cache) cache->heads.assign(static_cast<std::size_t>(config.heads), {});
  for (Index hd = 0; hd < config.heads; ++hd) {
    auto* head_cache = cache ? &cache->heads[static_cast<std::size_t>(hd)] : nullptr;
    heads.middleCols(hd * d, d) =
        attend_head<T>(plan, q.middleCols(hd * d, d), k.middleCols(hd * d, d), v.middleCols(hd * d, d), opts, head_cache);
  }

  Matrix<T> r1 = input + affine<T>(heads, w.wo, w.bo);
  Matrix<T> xhat1, xhat2;
  std::vector<T> rstd1, rstd2;
  Matrix<T> y1 = layer_norm<T>(r1, w.ln1_gain, w.ln1_bias, &xhat1, &rstd1);
  Matrix<T> pre = affine<T>(y1, w.w1, w.b1);
  Matrix<T> act = pre.unaryExpr([](T z) { return gelu(z); });
  Matrix<T> r2 = y1 + affine<T>(act, w.w2, w.b2);
  Matrix<T> out = layer_norm<T>(r2, w.ln2_gain, w.ln2_bias, &xhat2, &rstd2);

  if (!out.allFinite())
    throw NumericalError("non-finite activations in layer " + std::to_string(layer_index));

  if (cache) {
    cache->input = input;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attention = std::move(heads);
    cache->normed1 = std::move(y1);
    cache->ff_pre = std::move(pre);
    cache->ff_act = std::move(act);
    cache->output = out;
    cache->xhat1 = std::move(xhat1);
    cache->xhat2 = std::move(xhat2);
    cache->rstd1 = std::move(rstd1);
    cache->rstd2 = std::move(rstd2);
  }
  return out;
}

template <typename T>
Matrix<T> encoder_forward(const TokenSequence& seq, const EncoderConfig& config, const EncoderWeights<T>& weights,
                          const ForwardOptions& options, ForwardCache<T>* cache) {
  config.validate();
  const Index s = seq.length();
  seq.partition.validate();
  if (s != seq.partition.total()) throw std::invalid_argument("encoder_forward: partition does not cover the sequence");
  if (s > config.max_positions)
    throw std::invalid_argument("encoder_forward: sequence of " + std::to_string(s) + " exceeds max_positions " +
                                std::to_string(config.max_positions));
  if (static_cast<Index>(weights.layers.size()) != config.layers)
    throw std::invalid_argument("encoder_forward: weights hold a different layer count");

  Matrix<T> x(s, config.embed_dim);
  for (Index i = 0; i < s; ++i) {
    const TokenId id = seq.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= config.vocab_size)
      throw std::out_of_range("encoder_forward: token id " + std::to_string(id) + " outside the vocabulary");
    x.row(i) = weights.token_embedding.row(id) + weights.position_embedding.row(i);
  }

  auto plan = AttentionPlan::build(seq.partition, config.attention_pattern());
  if (cache) {
    cache->ids = seq.ids;
    cache->layers.assign(static_cast<std::size_t>(config.layers), {});
  }
  for (Index l = 0; l < config.layers; ++l) {
    auto* layer_cache = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
    x = layer_forward<T>(x, plan, config, weights.layers[static_cast<std::size_t>(l)], options, layer_cache, l);
  }
  if (cache) {
    cache->plan = std::move(plan);
    cache->last = x;
  }
  return x;
}

template <typename T>
T relevance_score(ConstRef<T> last_layer, const Matrix<T>& head_weight, const Matrix<T>& head_bias) {
  if (last_layer.rows() < 1) throw std::invalid_argument("relevance_score: no [CLS] row");
  if (head_weight.size() != last_layer.cols() || head_bias.size() != 1)
    throw std::invalid_argument("relevance_score: head shape mismatch");
  return last_layer.row(0).dot(head_weight.row(0)) + head_bias(0, 0);
}

template <typename T>
void score_backward(const ForwardCache<T>& cache, const EncoderConfig& config, const EncoderWeights<T>& weights,
                    T grad_score, EncoderWeights<T>& grads, const ForwardOptions& options) {
  const Index s = cache.last.rows();
  const Index h = config.embed_dim;
  const Index d = config.head_dim();
  if (static_cast<Index>(cache.layers.size()) != config.layers)
    throw std::invalid_argument("score_backward: cache does not match the configuration");

  grads.head_weight += grad_score * cache.last.row(0);
  grads.head_bias(0, 0) += grad_score;

  Matrix<T> g = Matrix<T>::Zero(s, h);
  g.row(0) = grad_score * weights.head_weight.row(0);

  const auto opts = attention_options(config, options);
  for (Index l = config.layers - 1; l >= 0; --l) {
    const auto& c = cache.layers[static_cast<std::size_t>(l)];
    const auto& w = weights.layers[static_cast<std::size_t>(l)];
    auto& gw = grads.layers[static_cast<std::size_t>(l)];

    const Matrix<T> dr2 = layer_norm_backward<T>(g, c.xhat2, c.rstd2, w.ln2_gain, gw.ln2_gain, gw.ln2_bias);
    gw.w2.noalias() += c.ff_act.transpose() * dr2;
    gw.b2 += dr2.colwise().sum();
    const Matrix<T> dpre = (dr2 * w.w2.transpose()).cwiseProduct(c.ff_pre.unaryExpr([](T z) { return gelu_derivative(z); }));
    gw.w1.noalias() += c.normed1.transpose() * dpre;
    gw.b1 += dpre.colwise().sum();
    const Matrix<T> dy1 = dr2 + dpre * w.w1.transpose();

    const Matrix<T> dr1 = layer_norm_backward<T>(dy1, c.xhat1, c.rstd1, w.ln1_gain, gw.ln1_gain, gw.ln1_bias);
    gw.wo.noalias() += c.attention.transpose() * dr1;
    gw.bo += dr1.colwise().sum();
    const Matrix<T> dheads = dr1 * w.wo.transpose();

    Matrix<T> dq(s, h), dk(s, h), dv(s, h);
    for (Index hd = 0; hd < config.heads; ++hd) {
      const auto hg = attend_head_backward<T>(cache.plan, c.q.middleCols(hd * d, d), c.k.middleCols(hd * d, d),
                                              c.v.middleCols(hd * d, d), c.heads[static_cast<std::size_t>(hd)],
                                              dheads.middleCols(hd * d, d), opts);
      dq.middleCols(hd * d, d) = hg.q;
      dk.middleCols(hd * d, d) = hg.k;
      dv.middleCols(hd * d, d) = hg.v;
    }
    gw.wq.noalias() += c.input.transpose() * dq;
    gw.wk.noalias() += c.input.transpose() * dk;
    gw.wv.noalias() += c.input.transpose() * dv;
    gw.bq += dq.colwise().sum();
    gw.bk += dk.colwise().sum();
    gw.bv += dv.colwise().sum();
    g = dr1 + dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
  }

  for (Index i = 0; i < s; ++i) {
    grads.token_embedding.row(cache.ids[static_cast<std::size_t>(i)]) += g.row(i);
    grads.position_embedding.row(i) += g.row(i);
  }
}

template <typename T>
Matrix<T> interpolate_positions(ConstRef<T> positions, Index new_max) {
  const Index old_max = positions.rows();
  if (new_max < 2) throw std::invalid_argument("interpolate_positions: new_max must be >= 2");
  if (old_max < 2) throw std::invalid_argument("interpolate_positions: need at least two source rows");
  Matrix<T> out(new_max, positions.cols());
  const double step = static_cast<double>(old_max - 1) / static_cast<double>(new_max - 1);
  for (Index p = 0; p < new_max; ++p) {
    const double coord = p == new_max - 1 ? static_cast<double>(old_max - 1) : static_cast<double>(p) * step;
    const auto lo = std::min(static_cast<Index>(std::floor(coord)), old_max - 1);
    const Index hi = std::min(lo + 1, old_max - 1);
    const T frac = static_cast<T>(coord - static_cast<double>(lo));
    out.row(p) = (T(1) - frac) * positions.row(lo) + frac * positions.row(hi);
  }
  return out;
}

#define SCE_INSTANTIATE(T)                                                                                           \
  template struct EncoderWeights<T>;                                                                                 \
  template struct Model<T>;                                                                                          \
  template Matrix<T> layer_forward<T>(ConstRef<T>, const AttentionPlan&, const EncoderConfig&, const LayerWeights<T>&, \
                                      const ForwardOptions&, LayerCache<T>*, Index);                                 \
  template Matrix<T> encoder_forward<T>(const TokenSequence&, const EncoderConfig&, const EncoderWeights<T>&,         \
                                        const ForwardOptions&, ForwardCache<T>*);                                    \
  template T relevance_score<T>(ConstRef<T>, const Matrix<T>&, const Matrix<T>&);                                    \
  template void score_backward<T>(const ForwardCache<T>&, const EncoderConfig&, const EncoderWeights<T>&, T,         \
                                  EncoderWeights<T>&, const ForwardOptions&);                                        \
  template Matrix<T> interpolate_positions<T>(ConstRef<T>, Index);

SCE_INSTANTIATE(float)
SCE_INSTANTIATE(double)

#undef SCE_INSTANTIATE

}  // namespace sce
