/*
 * Copyright (c) 2026, The rplm Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Decoder-only transformer language model over query/[EOQ]/response/[EOS]
// sequences, with two relevance components:
//
//  * source attention: after self-attention, every position from [EOQ] on
//    attends over the query positions only. The head-averaged weights are
//    max-pooled over the response positions into query salience scores, which
//    are regressed onto the informative-query-word indicator.
//  * topic inference: the last-layer [EOQ] state is projected through tanh
//    into a query representation h^q that scores the whole vocabulary as a
//    topic distribution, and is gated into every response position before the
//    (embedding-tied) output projection.
//
// Row layout. The model prepends [BOS] internally, so internal row r holds
// the token at 1-based sequence position r and row 0 holds [BOS]. Logit row
// r predicts the token at position r + 1.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rplm/corpus.hpp"
#include "rplm/errors.hpp"
#include "rplm/random.hpp"
#include "rplm/tensor.hpp"

namespace rplm {

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t hidden = 512;
  std::size_t heads = 8;
  std::size_t ff_size = 1024;
  std::size_t vocab_size = 12000;
  std::size_t max_seq_len = 128;  // internal rows, [BOS] included
  double gamma1 = 1.0;            // source-attention loss weight
  double gamma2 = 0.2;            // topic loss weight
  double dropout = 0.1;
  bool ssa_include_eoq = true;    // source attention at [EOQ] as well

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ff_size == 0 || max_seq_len < 4) {
      throw ParameterError("model sizes must be positive (max_seq_len >= 4)");
    }
    if (vocab_size <= special::kCount) {
      throw ParameterError("vocab_size must exceed the reserved tokens");
    }
    if (hidden % heads != 0) throw ParameterError("hidden must be divisible by heads");
    if (gamma1 < 0.0 || gamma2 < 0.0) throw ParameterError("loss weights must be non-negative");
    if (dropout < 0.0 || dropout >= 1.0) throw ParameterError("dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kInitRange = 0.08;
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kTopicLogFloor = -30.0;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct AttentionParams {
  Tensor<T> query, key, value, output;  // [d, d]
};

template <typename T>
struct LayerParams {
  AttentionParams<T> self_attn;
  Tensor<T> norm1_gain, norm1_bias;
  AttentionParams<T> source_attn;
  Tensor<T> norm2_gain, norm2_bias;
  Tensor<T> ff_in, ff_in_bias, ff_out, ff_out_bias;
  Tensor<T> norm3_gain, norm3_bias;
};

struct ForwardOptions {
  bool training = false;  // enables dropout
  Rng* rng = nullptr;     // required when training with dropout > 0
};

template <typename T>
struct LayerOutput {
  Tensor<T> hidden;          // [rows, d]
  Tensor<T> self_weights;    // alpha [heads, rows, rows]
  Tensor<T> source_weights;  // beta [heads, rows - source_begin, m]
};

template <typename T>
struct ForwardTrace {
  std::size_t m = 0;             // 1-based [EOQ] position
  std::size_t rows = 0;          // internal rows ([BOS] + sequence)
  std::size_t source_begin = 0;  // first internal row with source attention
  std::vector<Tensor<T>> hidden;          // H^0 .. H^L
  std::vector<Tensor<T>> self_weights;    // alpha per layer
  std::vector<Tensor<T>> source_weights;  // beta per layer
  Tensor<T> query_repr;                   // h^q [1, d]
  Tensor<T> topic_logits;                 // [1, V]
  Tensor<T> gates;                        // g for rows m+1.., [rows - m - 1, d]
  Tensor<T> mixed;                        // s [rows, d]
  Tensor<T> logits;                       // [rows, V]
};

template <typename T>
class Model {
 public:
  /// Seeded initialization: matrices uniform(-0.08, 0.08), biases zero,
  /// layer-norm gains one.
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.hidden, f = config_.ff_size, v = config_.vocab_size;
    auto mat = [&](std::size_t r, std::size_t c) {
      return Tensor<T>::uniform({r, c}, T(-kInitRange), T(kInitRange), rng, true);
    };
    auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
    auto ones = [](std::size_t n) { return Tensor<T>::filled({n}, T(1), true); };
    token_embedding_ = mat(v, d);
    position_embedding_ = mat(config_.max_seq_len, d);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      LayerParams<T> p;
      p.self_attn = {mat(d, d), mat(d, d), mat(d, d), mat(d, d)};
      p.norm1_gain = ones(d);
      p.norm1_bias = zeros(d);
      p.source_attn = {mat(d, d), mat(d, d), mat(d, d), mat(d, d)};
      p.norm2_gain = ones(d);
      p.norm2_bias = zeros(d);
      p.ff_in = mat(d, f);
      p.ff_in_bias = zeros(f);
      p.ff_out = mat(f, d);
      p.ff_out_bias = zeros(d);
      p.norm3_gain = ones(d);
      p.norm3_bias = zeros(d);
      layers_.push_back(std::move(p));
    }
    topic_proj_ = mat(d, d);
    topic_proj_bias_ = zeros(d);
    topic_out_ = mat(d, v);
    gate_query_ = mat(d, d);
    gate_hidden_ = mat(d, d);
    gate_bias_ = zeros(d);
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }

  /// Every learnable tensor, in a fixed order. The tensors are handles that
  /// share storage with the model.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    out.push_back({"embed.token", token_embedding_});
    out.push_back({"embed.position", position_embedding_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& p = layers_[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      auto attn = [&](const std::string& name, const AttentionParams<T>& a) {
        out.push_back({pre + name + ".query", a.query});
        out.push_back({pre + name + ".key", a.key});
        out.push_back({pre + name + ".value", a.value});
        out.push_back({pre + name + ".output", a.output});
      };
      attn("self", p.self_attn);
      out.push_back({pre + "norm1.gain", p.norm1_gain});
      out.push_back({pre + "norm1.bias", p.norm1_bias});
      attn("source", p.source_attn);
      out.push_back({pre + "norm2.gain", p.norm2_gain});
      out.push_back({pre + "norm2.bias", p.norm2_bias});
      out.push_back({pre + "ff.in", p.ff_in});
      out.push_back({pre + "ff.in_bias", p.ff_in_bias});
      out.push_back({pre + "ff.out", p.ff_out});
      out.push_back({pre + "ff.out_bias", p.ff_out_bias});
      out.push_back({pre + "norm3.gain", p.norm3_gain});
      out.push_back({pre + "norm3.bias", p.norm3_bias});
    }
    out.push_back({"topic.proj", topic_proj_});
    out.push_back({"topic.proj_bias", topic_proj_bias_});
    out.push_back({"topic.out", topic_out_});
    out.push_back({"gate.query", gate_query_});
    out.push_back({"gate.hidden", gate_hidden_});
    out.push_back({"gate.bias", gate_bias_});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.size();
    return total;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Deep copy of the parameter values into another precision.
  template <typename U>
  Model<U> cast() const {
    Model<U> out(config_, 0);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto values = dst[i].tensor.mutable_data();
      for (std::size_t j = 0; j < values.size(); ++j) values[j] = static_cast<U>(src[i].tensor[j]);
    }
    return out;
  }

  /// Copies parameter values from `other` (same configuration).
  void copy_from(const Model& other) {
    if (!(other.config_ == config_)) throw ShapeError("copy_from: configuration mismatch");
    auto src = other.parameters();
    auto dst = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
                dst[i].tensor.mutable_data().begin());
    }
  }

  const LayerParams<T>& layer(std::size_t l) const { return layers_.at(l); }
  LayerParams<T>& layer(std::size_t l) { return layers_.at(l); }
  const Tensor<T>& token_embedding() const { return token_embedding_; }
  const Tensor<T>& position_embedding() const { return position_embedding_; }
  const Tensor<T>& gate_bias() const { return gate_bias_; }

  // -------------------------------------------------------------------------

  /// H^0 = token embedding + position embedding. `ids` are internal ids,
  /// [BOS] included.
  Tensor<T> embed(std::span<const TokenId> ids) const {
    if (ids.size() > config_.max_seq_len) {
      throw LengthError("sequence of " + std::to_string(ids.size()) + " rows exceeds max_seq_len " +
                        std::to_string(config_.max_seq_len));
    }
    auto tokens = embedding(token_embedding_, ids);
    return add(tokens, slice_rows(position_embedding_, 0, ids.size()));
  }

  /// One layer: causal self-attention, add & norm; source attention over rows
  /// 1..m for rows >= source_begin (other rows pass through), add & norm;
  /// feed-forward, add & norm.
  LayerOutput<T> layer_forward(std::size_t l, const Tensor<T>& x, std::size_t m,
                               std::span<const std::uint8_t> self_mask,
                               const ForwardOptions& opts) const {
    const auto& p = layers_.at(l);
    const std::size_t rows = x.dim(0);
    if (m == 0 || m >= rows) {
      throw ContractError("layer_forward: query end " + std::to_string(m) +
                          " must lie inside the " + std::to_string(rows) + " rows");
    }
    const std::size_t heads = config_.heads;
    const T eps = static_cast<T>(kLayerNormEps);
    auto drop = [&](const Tensor<T>& t) {
      if (!opts.training || config_.dropout == 0.0) return t;
      if (!opts.rng) throw ContractError("training with dropout requires an rng");
      return dropout(t, config_.dropout, *opts.rng);
    };

    LayerOutput<T> out;
    auto q = matmul(x, p.self_attn.query);
    auto k = matmul(x, p.self_attn.key);
    auto v = matmul(x, p.self_attn.value);
    out.self_weights = attention_weights(q, k, heads, self_mask);
    auto context = matmul(attention_apply(drop(out.self_weights), v), p.self_attn.output);
    auto h1 = layer_norm(add(x, context), p.norm1_gain, p.norm1_bias, eps);

    const std::size_t begin = source_begin(m);
    Tensor<T> h2 = h1;
    if (begin < rows) {
      auto tail = slice_rows(h1, begin, rows);
      auto source = slice_rows(h1, 1, m + 1);
      auto sq = matmul(tail, p.source_attn.query);
      auto sk = matmul(source, p.source_attn.key);
      auto sv = matmul(source, p.source_attn.value);
      out.source_weights = attention_weights(sq, sk, heads);
      auto src_context = matmul(attention_apply(drop(out.source_weights), sv), p.source_attn.output);
      auto tail_out = layer_norm(add(tail, src_context), p.norm2_gain, p.norm2_bias, eps);
      h2 = concat_rows<T>({slice_rows(h1, 0, begin), tail_out});
    }

    auto inner = gelu(add(matmul(h2, p.ff_in), p.ff_in_bias));
    auto ff = drop(add(matmul(inner, p.ff_out), p.ff_out_bias));
    out.hidden = layer_norm(add(h2, ff), p.norm3_gain, p.norm3_bias, eps);
    return out;
  }

  /// h^q = tanh(H^L[m] W_f + b_f); returns (h^q, topic logits h^q W^o).
  std::pair<Tensor<T>, Tensor<T>> topic_inference(const Tensor<T>& top, std::size_t m) const {
    if (m >= top.dim(0)) throw ContractError("topic_inference: query end outside sequence");
    auto hq = tanh(add(matmul(slice_rows(top, m, m + 1), topic_proj_), topic_proj_bias_));
    auto logits = matmul(hq, topic_out_);
    return {hq, logits};
  }

  /// Rows r > m: g = sigmoid(h^q W^g + H[r] W^l + b), s = (1 - g) H[r] + g h^q.
  /// Rows r <= m: s = H[r]. Returns (s, g); g is undefined when no row
  /// exceeds m.
  std::pair<Tensor<T>, Tensor<T>> gate_mix(const Tensor<T>& top, const Tensor<T>& hq,
                                           std::size_t m) const {
    const std::size_t rows = top.dim(0);
    if (m + 1 >= rows) return {top, Tensor<T>()};
    auto tail = slice_rows(top, m + 1, rows);
    auto pre = add(matmul(tail, gate_hidden_), add(matmul(hq, gate_query_), gate_bias_));
    auto g = sigmoid(pre);
    auto mixed_tail = sub(tail, mul(g, sub(tail, hq)));
    return {concat_rows<T>({slice_rows(top, 0, m + 1), mixed_tail}), g};
  }

  /// Full forward pass. `ids` is the sequence x_1..x_len (possibly with
  /// trailing [PAD]); m is the 1-based [EOQ] position.
  ForwardTrace<T> forward(std::span<const TokenId> ids, std::size_t m,
                          const ForwardOptions& opts = {}) const {
    if (m == 0 || m > ids.size()) {
      throw ContractError("forward: query end " + std::to_string(m) + " outside sequence of " +
                          std::to_string(ids.size()));
    }
    std::vector<TokenId> internal;
    internal.reserve(ids.size() + 1);
    internal.push_back(special::kBos);
    internal.insert(internal.end(), ids.begin(), ids.end());
    const std::size_t rows = internal.size();

    std::vector<std::uint8_t> mask(rows * rows, 0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j <= i; ++j) mask[i * rows + j] = internal[j] != special::kPad;

    ForwardTrace<T> trace;
    trace.m = m;
    trace.rows = rows;
    trace.source_begin = source_begin(m);
    trace.hidden.push_back(embed(internal));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto out = layer_forward(l, trace.hidden.back(), m, mask, opts);
      trace.hidden.push_back(out.hidden);
      trace.self_weights.push_back(out.self_weights);
      trace.source_weights.push_back(out.source_weights);
    }
    const auto& top = trace.hidden.back();
    std::tie(trace.query_repr, trace.topic_logits) = topic_inference(top, m);
    std::tie(trace.mixed, trace.gates) = gate_mix(top, trace.query_repr, m);
    trace.logits = matmul(trace.mixed, transpose(token_embedding_));
    return trace;
  }

  std::size_t source_begin(std::size_t m) const { return config_.ssa_include_eoq ? m : m + 1; }

 private:
  ModelConfig config_;
  Tensor<T> token_embedding_, position_embedding_;
  std::vector<LayerParams<T>> layers_;
  Tensor<T> topic_proj_, topic_proj_bias_, topic_out_;
  Tensor<T> gate_query_, gate_hidden_, gate_bias_;
};

// ---------------------------------------------------------------------------
// Loss terms

/// Salience of each query position: head-averaged source attention, max over
/// rows [row_begin, row_end). beta is [heads, rows, m] or [rows, m].
template <typename T>
Tensor<T> salience_scores(const Tensor<T>& beta, std::size_t row_begin, std::size_t row_end) {
  if (!beta.defined() || row_begin >= row_end) {
    throw ContractError("salience_scores: no response positions to pool over");
  }
  const Tensor<T> pooled = beta.rank() == 3 ? mean_dim0(beta) : beta;
  if (row_end > pooled.dim(0)) throw ContractError("salience_scores: row range out of bounds");
  return max_rows(slice_rows(pooled, row_begin, row_end));
}

/// Salience over response positions m+1..n of the last layer.
template <typename T>
Tensor<T> salience_scores(const ForwardTrace<T>& trace, std::size_t n) {
  if (n <= trace.m) throw ContractError("salience_scores: sequence has no response positions");
  const std::size_t first = trace.m + 1 - trace.source_begin;
  return salience_scores(trace.source_weights.back(), first, first + (n - trace.m));
}

/// (1/m) * ||predicted - target||^2.
template <typename T>
Tensor<T> source_attention_loss(const Tensor<T>& predicted, std::span<const std::uint8_t> target) {
  if (predicted.size() != target.size()) {
    throw ShapeError("source_attention_loss: " + std::to_string(predicted.size()) +
                     " salience scores vs " + std::to_string(target.size()) + " targets");
  }
  std::vector<T> y(target.begin(), target.end());
  Tensor<T> yt(predicted.dims(), std::move(y));
  return scale(sum(square(sub(predicted, yt))), T(1) / static_cast<T>(target.size()));
}

/// -(1/|V|) * sum_i y_i * max(log P_i, -30).
template <typename T>
Tensor<T> topic_loss(const Tensor<T>& topic_log_probs, std::span<const std::uint8_t> y_kwd) {
  if (topic_log_probs.size() != y_kwd.size()) {
    throw ShapeError("topic_loss: distribution over " + std::to_string(topic_log_probs.size()) +
                     " vs indicator of " + std::to_string(y_kwd.size()));
  }
  std::vector<T> y(y_kwd.begin(), y_kwd.end());
  Tensor<T> yt(topic_log_probs.dims(), std::move(y));
  auto clamped = clamp_min(topic_log_probs, static_cast<T>(kTopicLogFloor));
  return scale(sum(mul(clamped, yt)), T(-1) / static_cast<T>(y_kwd.size()));
}

/// Mean next-token cross-entropy over every sequence position; logit row t
/// predicts ids[t]. [PAD] targets are excluded.
template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, std::span<const TokenId> ids) {
  if (logits.dim(0) < ids.size()) throw ShapeError("lm_loss: fewer logit rows than targets");
  return cross_entropy_rows(slice_rows(logits, 0, ids.size()), ids,
                            static_cast<std::int64_t>(special::kPad));
}

struct LossBreakdown {
  double mle = 0.0;
  double src = 0.0;
  double kwd = 0.0;
  double total = 0.0;
};

template <typename T>
struct LossTerms {
  Tensor<T> mle, src, kwd, total;
  Tensor<T> salience;
  ForwardTrace<T> trace;

  LossBreakdown values() const { return {mle.item(), src.item(), kwd.item(), total.item()}; }
};

/// L = L_mle + gamma1 * L_src + gamma2 * L_kwd. Throws NumericError naming
/// any non-finite component.
template <typename T>
LossTerms<T> total_loss(const Model<T>& model, const TrainingInstance& inst,
                        const ForwardOptions& opts = {}) {
  const auto& cfg = model.config();
  if (inst.y_src.size() != inst.m) throw ShapeError("instance y_src length differs from m");
  LossTerms<T> terms;
  terms.trace = model.forward(inst.ids, inst.m, opts);
  terms.mle = lm_loss(terms.trace.logits, inst.ids);
  terms.salience = salience_scores(terms.trace, inst.n);
  terms.src = source_attention_loss(terms.salience, inst.y_src);
  const auto y_kwd = inst.y_kwd(cfg.vocab_size);
  terms.kwd = topic_loss(log_softmax_lastdim(terms.trace.topic_logits), y_kwd);
  terms.total = add(add(terms.mle, scale(terms.src, static_cast<T>(cfg.gamma1))),
                    scale(terms.kwd, static_cast<T>(cfg.gamma2)));
  const std::pair<const char*, const Tensor<T>*> parts[] = {
      {"L_mle", &terms.mle}, {"L_src", &terms.src}, {"L_kwd", &terms.kwd}};
  for (const auto& [name, t] : parts) {
    if (!std::isfinite(t->item())) throw NumericError(std::string("non-finite loss component ") + name);
  }
  return terms;
}

}  // namespace rplm
