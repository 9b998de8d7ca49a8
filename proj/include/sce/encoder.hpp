// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sce/attention.hpp"
#include "sce/memory.hpp"
#include "sce/pattern.hpp"
#include "sce/types.hpp"

namespace sce {

using TokenId = std::int32_t;

/// Whitespace tokenizer over a fixed vocabulary. Ids 0..2 are reserved for
/// [CLS], [SEP] and [UNK].
class Vocabulary {
 public:
  static constexpr TokenId kCls = 0;
  static constexpr TokenId kSep = 1;
  static constexpr TokenId kUnk = 2;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& terms);

  // Vocabulary of `count` synthetic terms named t0, t1, ...
  static Vocabulary synthetic(std::size_t count);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::vector<TokenId> encode(std::string_view text) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  SubsequencePartition partition;
  Index truncated = 0;  // document tokens dropped to fit max_positions

  Index length() const { return static_cast<Index>(ids.size()); }
};

/// [CLS] q [SEP] d [SEP]. Document tokens are dropped from the tail when the
/// result would exceed max_positions; the query is never truncated.
TokenSequence assemble_input(std::span<const TokenId> query, std::span<const TokenId> document, Index max_positions);

struct EncoderConfig {
  Index layers = 2;
  Index embed_dim = 16;
  Index heads = 2;
  Index ff_dim = 32;
  Index max_positions = 64;
  Index vocab_size = 64;
  PatternKind pattern = PatternKind::sparse;
  Window window = Window::of(4);
  std::size_t global_every = 30;  // qds only
  Precision precision = Precision::f64;
  PaddingMode padding = PaddingMode::exclude;

  Index head_dim() const { return embed_dim / heads; }
  AttentionPattern attention_pattern() const;
  void validate() const;
};

template <typename T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wo;  // h x h, applied as x * W
  Matrix<T> bq, bk, bv, bo;  // 1 x h
  Matrix<T> ln1_gain, ln1_bias;
  Matrix<T> w1, b1;  // h x ff, 1 x ff
  Matrix<T> w2, b2;  // ff x h, 1 x h
  Matrix<T> ln2_gain, ln2_bias;

  template <typename F>
  void visit(const std::string& prefix, F&& f) { visit_fields(*this, prefix, f); }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const { visit_fields(*this, prefix, f); }

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& self, const std::string& prefix, F& f) {
    f(prefix + "attention.query.weight", self.wq);
    f(prefix + "attention.query.bias", self.bq);
    f(prefix + "attention.key.weight", self.wk);
    f(prefix + "attention.key.bias", self.bk);
    f(prefix + "attention.value.weight", self.wv);
    f(prefix + "attention.value.bias", self.bv);
    f(prefix + "attention.output.weight", self.wo);
    f(prefix + "attention.output.bias", self.bo);
    f(prefix + "attention.norm.gain", self.ln1_gain);
    f(prefix + "attention.norm.bias", self.ln1_bias);
    f(prefix + "ffn.input.weight", self.w1);
    f(prefix + "ffn.input.bias", self.b1);
    f(prefix + "ffn.output.weight", self.w2);
    f(prefix + "ffn.output.bias", self.b2);
    f(prefix + "ffn.norm.gain", self.ln2_gain);
    f(prefix + "ffn.norm.bias", self.ln2_bias);
  }
};

/// All trainable tensors. The same type carries gradients.
template <typename T>
struct EncoderWeights {
  Matrix<T> token_embedding;     // vocab x h
  Matrix<T> position_embedding;  // max_positions x h
  std::vector<LayerWeights<T>> layers;
  Matrix<T> head_weight;  // 1 x h
  Matrix<T> head_bias;    // 1 x 1

  template <typename F>
  void visit(F&& f) { visit_fields(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_fields(*this, f); }

  std::int64_t parameter_count() const;

  // Same shapes, all zeros.
  EncoderWeights zeros_like() const;
  void set_zero();
  void add(const EncoderWeights& other);
  void scale(T factor);

  // Symmetric uniform init with bound 1/sqrt(fan_in); norms start at (1, 0).
  static EncoderWeights initialize(const EncoderConfig& config, std::uint64_t seed);

 private:
  template <typename Self, typename F>
  static void visit_fields(Self& self, F& f) {
    f(std::string("embedding.token"), self.token_embedding);
    f(std::string("embedding.position"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) self.layers[l].visit("layer." + std::to_string(l) + ".", f);
    f(std::string("head.weight"), self.head_weight);
    f(std::string("head.bias"), self.head_bias);
  }
};

/// Weights plus configuration; the weight bytes are charged to the ledger.
template <typename T>
struct Model {
  EncoderConfig config;
  EncoderWeights<T> weights;
  mem::Ticket ticket;

  Model(EncoderConfig c, EncoderWeights<T> w);
  static Model initialize(const EncoderConfig& config, std::uint64_t seed);
};

struct ForwardOptions {
  KernelPath kernel = KernelPath::blocked;
};

template <typename T>
struct LayerCache {
  Matrix<T> input, q, k, v, attention, normed1, ff_pre, ff_act, output;
  std::vector<T> rstd1, rstd2;
  Matrix<T> xhat1, xhat2;
  std::vector<HeadAttentionCache<T>> heads;
};

template <typename T>
struct ForwardCache {
  std::vector<TokenId> ids;
  AttentionPlan plan;
  std::vector<LayerCache<T>> layers;
  Matrix<T> last;
};

/// One transformer layer: multi-head patterned attention, output projection,
/// residual + norm, GELU feed-forward, residual + norm. Throws NumericalError
/// naming `layer_index` if the output is not finite.
template <typename T>
Matrix<T> layer_forward(ConstRef<T> embeddings, const AttentionPlan& plan, const EncoderConfig& config,
                        const LayerWeights<T>& weights, const ForwardOptions& options = {},
                        LayerCache<T>* cache = nullptr, Index layer_index = 0);

/// Token + position embedding followed by every layer.
template <typename T>
Matrix<T> encoder_forward(const TokenSequence& seq, const EncoderConfig& config, const EncoderWeights<T>& weights,
                          const ForwardOptions& options = {}, ForwardCache<T>* cache = nullptr);

/// Linear head over the [CLS] row of the last layer.
template <typename T>
T relevance_score(ConstRef<T> last_layer, const Matrix<T>& head_weight, const Matrix<T>& head_bias);

template <typename T>
T score_sequence(const TokenSequence& seq, const Model<T>& model, const ForwardOptions& options = {}) {
  const auto last = encoder_forward(seq, model.config, model.weights, options);
  return relevance_score<T>(last, model.weights.head_weight, model.weights.head_bias);
}

/// Accumulates d(score)/d(weights) * grad_score into `grads` using a cache
/// from encoder_forward.
template <typename T>
void score_backward(const ForwardCache<T>& cache, const EncoderConfig& config, const EncoderWeights<T>& weights,
                    T grad_score, EncoderWeights<T>& grads, const ForwardOptions& options = {});

/// Stretches learned absolute position embeddings to new_max rows; row p
/// blends the two old rows around p * (old_max - 1) / (new_max - 1).
template <typename T>
Matrix<T> interpolate_positions(ConstRef<T> positions, Index new_max);

}  // namespace sce
