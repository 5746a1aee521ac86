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

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "rplm/model.hpp"
#include "rplm/model_grad_check.hpp"
#include "support/reference_model.hpp"

namespace rplm {
namespace {

using testing::Mat;
using testing::param;
using testing::set_param;

ModelConfig tiny(std::size_t vocab = 20) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ff_size = 16;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.dropout = 0.0;
  return c;
}

TrainingInstance random_instance(Rng& rng, std::size_t vocab, std::size_t n, std::size_t m) {
  TrainingInstance inst;
  inst.m = m;
  inst.n = n;
  for (std::size_t i = 0; i < n; ++i) {
    inst.ids.push_back(static_cast<TokenId>(special::kCount + rng.below(vocab - special::kCount)));
  }
  inst.ids[m - 1] = special::kEoq;
  inst.ids[n - 1] = special::kEos;
  inst.y_src.assign(m, 0);
  for (std::size_t i = 0; i + 1 < m; ++i) inst.y_src[i] = rng.below(3) == 0;
  for (TokenId v = special::kCount; v < vocab; ++v)
    if (rng.below(4) == 0) inst.topic_ids.push_back(v);
  return inst;
}

void zero_param(Model<double>& model, const std::string& name) {
  for (auto& p : model.parameters())
    if (p.name == name) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
}

double max_abs_diff(const Tensor<double>& t, const Mat& ref) {
  double worst = 0;
  const std::size_t cols = ref[0].size();
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) worst = std::max(worst, std::abs(t[i * cols + j] - ref[i][j]));
  return worst;
}

// ---------------------------------------------------------------------------

TEST(ModelConfig, Validation) {
  auto c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny();
  c.layers = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_NO_THROW(tiny().validate());
}

TEST(ModelConfig, DefaultsAreFullScale) {
  ModelConfig c;
  EXPECT_EQ(c.layers, 6u);
  EXPECT_EQ(c.hidden, 512u);
  EXPECT_EQ(c.heads, 8u);
  EXPECT_EQ(c.ff_size, 1024u);
  EXPECT_DOUBLE_EQ(c.gamma1, 1.0);
  EXPECT_DOUBLE_EQ(c.gamma2, 0.2);
}

TEST(ModelState, ParameterCountDependsOnlyOnConfig) {
  Model<float> a(tiny(), 1), b(tiny(), 99);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  const std::size_t d = 8, f = 16, v = 20, L = 2, seq = 16;
  const std::size_t per_layer = 8 * d * d + 6 * d + d * f + f + f * d + d;
  EXPECT_EQ(a.parameter_count(), v * d + seq * d + L * per_layer + d * d + d + d * v + 2 * d * d + d);
}

TEST(ModelState, SeededInitialization) {
  Model<float> a(tiny(), 7), b(tiny(), 7), c(tiny(), 8);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i].tensor.size(); ++j) {
      EXPECT_EQ(pa[i].tensor[j], pb[i].tensor[j]);
      EXPECT_LE(std::abs(pa[i].tensor[j]), 1.0f);
      any_diff |= pa[i].tensor[j] != pc[i].tensor[j];
    }
  }
  EXPECT_TRUE(any_diff);
}

// ---------------------------------------------------------------------------
// Embedding

TEST(Embed, ZeroTablesGiveZero) {
  Model<double> model(tiny(), 1);
  zero_param(model, "embed.token");
  zero_param(model, "embed.position");
  const std::vector<TokenId> ids{1, 5, 6, 2};
  const auto h = model.embed(ids);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, LengthBoundary) {
  Model<double> model(tiny(), 1);
  std::vector<TokenId> ids(16, 5);
  EXPECT_NO_THROW(model.embed(ids));
  ids.push_back(5);
  EXPECT_THROW(model.embed(ids), LengthError);
}

TEST(Embed, RepeatedTokenDiffersByPosition) {
  Model<double> model(tiny(), 1);
  const std::vector<TokenId> ids{7, 9, 7};
  auto h = model.embed(ids);
  auto pos = param(model, "embed.position");
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(h.at(2, c) - h.at(0, c), pos[2][c] - pos[0][c], 1e-15);
}

// ---------------------------------------------------------------------------
// Layers and attention structure

TEST(Layer, ForwardMatchesLoopReference) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Model<double> model(tiny(), seed);
    for (auto& p : model.parameters()) {
      Rng rng(seed * 31 + p.tensor.size());
      for (auto& v : p.tensor.mutable_data()) v += rng.uniform(-0.3, 0.3);
    }
    Rng rng(seed);
    auto inst = random_instance(rng, 20, 11, 5);
    auto trace = model.forward(inst.ids, inst.m);
    auto ref = testing::reference_forward(model, inst.ids, inst.m);
    for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
      EXPECT_LT(max_abs_diff(trace.hidden[l], ref.hidden[l]), 1e-10) << "layer " << l;
    }
    EXPECT_LT(max_abs_diff(trace.logits, ref.logits), 1e-10);
  }
}

// One head of width 2 over [BOS] plus three tokens, every weight set by hand.
// Query and key projections are zero, so self attention is a running mean.
// Rows of x + ctx:
//   [BOS] (1,0) + (1,0)       = (2, 0)
//   5     (0,1) + (.5,.5)     = (.5, 1.5)
//   [EOQ] (0,0) + (1/3,1/3)   = (1/3, 1/3)
//   6     (2,0) + (3/4,1/4)   = (2.75, .25)
// A norm maps (a, b) to (u, -u) with u = h / sqrt(h^2 + eps), h = (a - b) / 2.
// The source and feed-forward branches are zero, so query rows pass through
// two norms and rows from [EOQ] on through three.
TEST(Layer, HandComputedSingleHead) {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 2;
  c.heads = 1;
  c.ff_size = 2;
  c.vocab_size = 8;
  c.max_seq_len = 4;
  c.dropout = 0.0;
  Model<double> model(c, 1);
  for (auto& p : model.parameters()) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
  set_param(model, "embed.token", {{0, 0}, {1, 0}, {0, 0}, {0, 0}, {0, 0}, {0, 1}, {2, 0}, {0, 0}});
  set_param(model, "layer0.self.value", {{1, 0}, {0, 1}});
  set_param(model, "layer0.self.output", {{1, 0}, {0, 1}});
  for (const char* g : {"layer0.norm1.gain", "layer0.norm2.gain", "layer0.norm3.gain"}) set_param(model, g, {{1, 1}});

  std::vector<std::uint8_t> causal(16, 0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal[i * 4 + j] = 1;
  const auto out = model.layer_forward(0, model.embed(std::vector<TokenId>{1, 5, 2, 6}), 2, causal, {});

  auto squash = [](double h, int times) {
    for (int i = 0; i < times; ++i) h = h / std::sqrt(h * h + 1e-5);
    return h;
  };
  const double expected[4] = {squash(1.0, 2), squash(-0.5, 2), 0.0, squash(1.25, 3)};
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_NEAR(out.hidden.at(r, 0), expected[r], 1e-12) << "row " << r;
    EXPECT_NEAR(out.hidden.at(r, 1), -expected[r], 1e-12) << "row " << r;
  }
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out.self_weights[3 * 4 + j], 0.25);
  EXPECT_DOUBLE_EQ(out.self_weights[1 * 4 + 1], 0.5);
  EXPECT_EQ(out.self_weights[1 * 4 + 2], 0.0);
}

TEST(Layer, QueryEndOutsideSequenceIsContractError) {
  Model<double> model(tiny(), 1);
  std::vector<TokenId> rows{1, 5, 2};
  std::vector<std::uint8_t> mask(9, 1);
  EXPECT_THROW(model.layer_forward(0, model.embed(rows), 3, mask, {}), ContractError);
  const std::vector<TokenId> ids{5, 6};
  EXPECT_THROW(model.forward(ids, 3), ContractError);
}

TEST(Attention, RowsAreCausalProbabilityVectors) {
  Model<float> model(tiny(), 3);
  Rng rng(3);
  auto inst = random_instance(rng, 20, 12, 5);
  auto trace = model.forward(inst.ids, inst.m);
  const std::size_t rows = trace.rows;
  for (const auto& alpha : trace.self_weights) {
    ASSERT_EQ(alpha.dims(), (Shape{2, rows, rows}));
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < rows; ++i) {
        double total = 0;
        std::size_t nonzero = 0;
        for (std::size_t j = 0; j < rows; ++j) {
          const float w = alpha[(h * rows + i) * rows + j];
          EXPECT_GE(w, 0.0f);
          if (j > i) EXPECT_EQ(w, 0.0f);
          nonzero += w != 0.0f;
          total += w;
        }
        EXPECT_EQ(nonzero, i + 1);
        EXPECT_NEAR(total, 1.0, 1e-5);
      }
  }
  for (const auto& beta : trace.source_weights) {
    ASSERT_EQ(beta.dims(), (Shape{2, rows - trace.source_begin, inst.m}));
    for (std::size_t r = 0; r < 2 * (rows - trace.source_begin); ++r) {
      double total = 0;
      for (std::size_t j = 0; j < inst.m; ++j) total += beta[r * inst.m + j];
      EXPECT_NEAR(total, 1.0, 1e-5);
    }
  }
}

TEST(Attention, SourceRowsStartAtQueryEnd) {
  auto c = tiny();
  Model<float> with(c, 1);
  c.ssa_include_eoq = false;
  Model<float> without(c, 1);
  const std::vector<TokenId> ids{5, 6, 2, 7, 8, 3};
  EXPECT_EQ(with.forward(ids, 3).source_weights[0].dim(1), 4u);
  EXPECT_EQ(without.forward(ids, 3).source_weights[0].dim(1), 3u);
}

TEST(Attention, QueryRowsPassThroughSourceSublayer) {
  Model<double> model(tiny(), 4);
  Rng rng(4);
  auto inst = random_instance(rng, 20, 10, 4);
  auto base = model.forward(inst.ids, inst.m);
  for (auto& p : model.parameters())
    if (p.name.find("source") != std::string::npos)
      for (auto& v : p.tensor.mutable_data()) v *= 3.0;
  auto changed = model.forward(inst.ids, inst.m);
  for (std::size_t r = 0; r < model.source_begin(inst.m); ++r)
    for (std::size_t c = 0; c < 20; ++c) EXPECT_EQ(base.logits.at(r, c), changed.logits.at(r, c));
}

TEST(Causality, PerturbingATokenOnlyAffectsLaterLogits) {
  Model<double> model(tiny(), 5);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto inst = random_instance(rng, 20, 12, 5);
    auto base = model.forward(inst.ids, inst.m);
    const std::size_t t = rng.below(inst.n);
    auto ids = inst.ids;
    ids[t] = ids[t] == 10 ? 11 : 10;
    if (t == inst.m - 1) continue;
    auto pert = model.forward(ids, inst.m);
    // Logit row r is predicted from ids[0..r-1].
    for (std::size_t r = 0; r < base.rows; ++r) {
      double diff = 0;
      for (std::size_t c = 0; c < 20; ++c) diff = std::max(diff, std::abs(base.logits.at(r, c) - pert.logits.at(r, c)));
      if (r <= t) {
        EXPECT_EQ(diff, 0.0) << "row " << r << " perturbed " << t;
      } else {
        EXPECT_GT(diff, 0.0) << "row " << r << " perturbed " << t;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Salience and source-attention loss

TEST(Salience, MaxOverHeadAveragedRows) {
  auto beta = Tensor<double>::matrix({{0.9, 0.1}, {0.2, 0.8}});
  auto y = salience_scores(beta, 0, 2);
  EXPECT_DOUBLE_EQ(y[0], 0.9);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
  auto heads = Tensor<double>({2, 2, 2}, {1.0, 0.0, 0.4, 0.6, 0.8, 0.2, 0.0, 1.0});
  auto yh = salience_scores(heads, 0, 2);
  EXPECT_DOUBLE_EQ(yh[0], 0.9);
  EXPECT_DOUBLE_EQ(yh[1], 0.8);
}

TEST(Salience, SingleRowAndUniform) {
  auto one = salience_scores(Tensor<double>::matrix({{0.3, 0.7}}), 0, 1);
  EXPECT_DOUBLE_EQ(one[0], 0.3);
  EXPECT_DOUBLE_EQ(one[1], 0.7);
  auto uni = salience_scores(Tensor<double>::filled({3, 4}, 0.25), 0, 3);
  for (double v : uni.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_THROW(salience_scores(Tensor<double>::filled({3, 4}, 0.25), 2, 2), ContractError);
}

TEST(Salience, ModelScoresLieInUnitInterval) {
  Model<float> model(tiny(), 6);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto inst = random_instance(rng, 20, 6 + rng.below(10), 2 + rng.below(4));
    auto terms = total_loss(model, inst);
    ASSERT_EQ(terms.salience.size(), inst.m);
    for (float v : terms.salience.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_GE(terms.src.item(), 0.0f);
    EXPECT_LE(terms.src.item(), 1.0f);
  }
}

TEST(SourceLoss, HandValues) {
  const std::uint8_t y2[] = {0, 0};
  EXPECT_DOUBLE_EQ(source_attention_loss(Tensor<double>::vector({1, 0}), y2).item(), 0.5);
  const std::uint8_t y4[] = {1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(source_attention_loss(Tensor<double>::vector({0.5, 0.5, 0.5, 0.5}), y4).item(), 0.25);
  const std::uint8_t same[] = {1, 0};
  EXPECT_DOUBLE_EQ(source_attention_loss(Tensor<double>::vector({1, 0}), same).item(), 0.0);
  EXPECT_THROW(source_attention_loss(Tensor<double>::vector({1, 0, 0}), same), ShapeError);
}

// ---------------------------------------------------------------------------
// Topic inference, topic loss, gate

TEST(Topic, ZeroHeadGivesUniformDistribution) {
  Model<double> model(tiny(), 7);
  zero_param(model, "topic.proj");
  zero_param(model, "topic.out");
  const std::vector<TokenId> ids{5, 6, 2, 7, 3};
  auto trace = model.forward(ids, 3);
  for (double v : trace.query_repr.data()) EXPECT_EQ(v, 0.0);
  auto p = softmax_lastdim(trace.topic_logits);
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 20, 1e-15);
}

TEST(Topic, QueryRepresentationInOpenUnitBall) {
  Model<double> model(tiny(), 8);
  for (auto& p : model.parameters())
    if (p.name.rfind("topic", 0) == 0)
      for (auto& v : p.tensor.mutable_data()) v *= 10;
  Rng rng(8);
  auto inst = random_instance(rng, 20, 10, 4);
  auto trace = model.forward(inst.ids, inst.m);
  for (double v : trace.query_repr.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  double total = 0;
  const auto p = softmax_lastdim(trace.topic_logits);
  for (double v : p.data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Topic, HandSetTwoByTwo) {
  ModelConfig c = tiny(6);
  c.hidden = 2;
  c.heads = 1;
  Model<double> model(c, 1);
  auto top = Tensor<double>::matrix({{0, 0}, {0.5, -0.5}});
  set_param(model, "topic.proj", {{1, 0}, {0, 2}});
  set_param(model, "topic.proj_bias", {{0.1, 0}});
  set_param(model, "topic.out", {{1, 0, 0, 0, 0, 0}, {0, 1, 0, 0, 0, 0}});
  auto [hq, logits] = model.topic_inference(top, 1);
  const double h0 = std::tanh(0.6), h1 = std::tanh(-1.0);
  EXPECT_NEAR(hq[0], h0, 1e-15);
  EXPECT_NEAR(hq[1], h1, 1e-15);
  auto p = softmax_lastdim(logits);
  const double z = std::exp(h0) + std::exp(h1) + 4.0;
  EXPECT_NEAR(p[0], std::exp(h0) / z, 1e-15);
  EXPECT_NEAR(p[1], std::exp(h1) / z, 1e-15);
  EXPECT_NEAR(p[2], 1.0 / z, 1e-15);
}

TEST(TopicLoss, HandValues) {
  std::vector<std::uint8_t> none(20, 0);
  auto uniform = log_softmax_lastdim(Tensor<double>::zeros({1, 20}));
  EXPECT_EQ(topic_loss(uniform, none).item(), 0.0);
  std::vector<std::uint8_t> one(20, 0);
  one[7] = 1;
  EXPECT_NEAR(topic_loss(uniform, one).item(), std::log(20.0) / 20, 1e-15);
  EXPECT_NEAR(topic_loss(uniform, one).item(), 0.1498, 1e-4);

  std::vector<double> lp(20, std::log(1e-20));
  lp[3] = lp[4] = std::log(0.5);
  std::vector<std::uint8_t> two(20, 0);
  two[3] = two[4] = 1;
  EXPECT_NEAR(topic_loss(Tensor<double>({1, 20}, lp), two).item(), -(2.0 / 20) * std::log(0.5), 1e-15);
}

TEST(TopicLoss, LogProbabilityFloor) {
  std::vector<std::uint8_t> y{1, 0};
  auto lp = Tensor<double>::vector({-1e6, 0});
  EXPECT_NEAR(topic_loss(lp, y).item(), 30.0 / 2, 1e-12);
  EXPECT_THROW(topic_loss(lp, std::vector<std::uint8_t>{1}), ShapeError);
}

TEST(Gate, SaturatedLimits) {
  Model<double> model(tiny(), 9);
  auto top = Tensor<double>::uniform({5, 8}, -1, 1, *std::make_unique<Rng>(1));
  auto hq = Tensor<double>::uniform({1, 8}, -1, 1, *std::make_unique<Rng>(2));
  set_param(model, "gate.bias", {std::vector<double>(8, -1e4)});
  auto [s_low, g_low] = model.gate_mix(top, hq, 2);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(s_low.at(r, c), top.at(r, c));
  set_param(model, "gate.bias", {std::vector<double>(8, 1e4)});
  auto [s_high, g_high] = model.gate_mix(top, hq, 2);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(s_high.at(r, c), r > 2 ? hq[c] : top.at(r, c));
}

TEST(Gate, HandMix) {
  ModelConfig c = tiny(6);
  c.hidden = 2;
  c.heads = 1;
  Model<double> model(c, 1);
  zero_param(model, "gate.query");
  zero_param(model, "gate.hidden");
  zero_param(model, "gate.bias");
  auto top = Tensor<double>::matrix({{9, 9}, {0, 1}});
  auto [s, g] = model.gate_mix(top, Tensor<double>::matrix({{1, 0}}), 0);
  EXPECT_DOUBLE_EQ(g[0], 0.5);
  EXPECT_DOUBLE_EQ(s.at(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.at(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(s.at(0, 0), 9.0);
}

TEST(Gate, ValuesInOpenUnitInterval) {
  Model<float> model(tiny(), 10);
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto inst = random_instance(rng, 20, 12, 4);
    auto trace = model.forward(inst.ids, inst.m);
    ASSERT_EQ(trace.gates.dim(0), trace.rows - inst.m - 1);
    for (float g : trace.gates.data()) {
      EXPECT_GT(g, 0.0f);
      EXPECT_LT(g, 1.0f);
    }
  }
}

// ---------------------------------------------------------------------------
// Language-model and total loss

TEST(LmLoss, ZeroOutputProjectionIsLogV) {
  Model<double> model(tiny(), 11);
  zero_param(model, "embed.token");
  const std::vector<TokenId> ids{5, 6, 2, 7, 3};
  EXPECT_NEAR(lm_loss(model.forward(ids, 3).logits, ids).item(), std::log(20.0), 1e-12);
}

TEST(LmLoss, QueryPositionsContribute) {
  Model<double> model(tiny(), 12);
  const std::vector<TokenId> ids{5, 6, 2, 7, 3};
  auto logits = model.forward(ids, 3).logits;
  std::vector<TokenId> masked = ids;
  masked[0] = masked[1] = special::kPad;
  EXPECT_NE(lm_loss(logits, ids).item(), lm_loss(logits, masked).item());
}

TEST(LmLoss, PadTargetsAreExcluded) {
  Model<double> model(tiny(), 13);
  const std::vector<TokenId> ids{5, 6, 2, 7, 3};
  std::vector<TokenId> padded = ids;
  padded.push_back(special::kPad);
  padded.push_back(special::kPad);
  auto a = lm_loss(model.forward(ids, 3).logits, ids).item();
  auto b = lm_loss(model.forward(padded, 3).logits, padded).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_NEAR(2.0 + 1.0 * 0.5 + 0.2 * 1.0, 2.7, 1e-15);
  auto c = tiny();
  c.gamma1 = 1.0;
  c.gamma2 = 0.2;
  Model<double> model(c, 14);
  Rng rng(14);
  auto inst = random_instance(rng, 20, 12, 5);
  auto v = total_loss(model, inst).values();
  EXPECT_NEAR(v.total, v.mle + 1.0 * v.src + 0.2 * v.kwd, 1e-12);
  EXPECT_GT(v.src, 0.0);
  EXPECT_GT(v.kwd, 0.0);
}

TEST(TotalLoss, ZeroWeightsLeaveLanguageModelLoss) {
  auto c = tiny();
  c.gamma1 = c.gamma2 = 0.0;
  Model<double> model(c, 15);
  Rng rng(15);
  auto inst = random_instance(rng, 20, 12, 5);
  auto v = total_loss(model, inst).values();
  EXPECT_EQ(v.total, v.mle);
}

TEST(TotalLoss, EmptySupervision) {
  Model<double> model(tiny(), 16);
  Rng rng(16);
  auto inst = random_instance(rng, 20, 12, 5);
  std::fill(inst.y_src.begin(), inst.y_src.end(), 0);
  inst.topic_ids.clear();
  auto terms = total_loss(model, inst);
  double mean_sq = 0;
  for (double v : terms.salience.data()) mean_sq += v * v;
  mean_sq /= static_cast<double>(inst.m);
  EXPECT_NEAR(terms.total.item(), terms.mle.item() + 1.0 * mean_sq, 1e-12);
  EXPECT_EQ(terms.kwd.item(), 0.0);
}

TEST(TotalLoss, NonFiniteComponentIsNamed) {
  Model<double> model(tiny(), 17);
  for (auto& p : model.parameters())
    if (p.name == "topic.out") p.tensor.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  Rng rng(17);
  auto inst = random_instance(rng, 20, 12, 5);
  try {
    total_loss(model, inst);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("L_kwd"), std::string::npos) << e.what();
  }
}

// With both weights zero, the source sublayer's output projection zeroed and
// the gate saturated shut, the model reduces to a plain decoder LM. The only
// residue is the second layer norm re-normalizing already normalized rows.
TEST(Ablation, ReducesToPlainDecoder) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto c = tiny();
    c.gamma1 = c.gamma2 = 0.0;
    Model<double> model(c, seed);
    for (std::size_t l = 0; l < c.layers; ++l) zero_param(model, "layer" + std::to_string(l) + ".source.output");
    set_param(model, "gate.bias", {std::vector<double>(8, -1e4)});
    Rng rng(seed);
    auto inst = random_instance(rng, 20, 12, 5);
    auto trace = model.forward(inst.ids, inst.m);
    auto plain = testing::reference_forward(model, inst.ids, inst.m, {.source_attention = false, .gate = false});
    EXPECT_LT(max_abs_diff(trace.logits, plain.logits), 1e-4);
    auto terms = total_loss(model, inst);
    EXPECT_EQ(terms.total.item(), terms.mle.item());
  }
}

// ---------------------------------------------------------------------------

TEST(ModelGradCheck, AllThreeTermsTinyConfig) {
  auto c = tiny();
  Model<double> model(c, 21);
  Rng rng(21);
  auto inst = random_instance(rng, 20, 12, 5);
  EXPECT_LT(grad_check_total_loss(model, inst).max_relative_error, 1e-4);
}

TEST(ModelGradCheck, RequiresDropoutOff) {
  auto c = tiny();
  c.dropout = 0.1;
  Model<double> model(c, 1);
  Rng rng(1);
  auto inst = random_instance(rng, 20, 12, 5);
  EXPECT_THROW(grad_check_total_loss(model, inst), ContractError);
}

TEST(Cast, PreservesForwardPass) {
  Model<double> model(tiny(), 22);
  auto as_float = model.cast<float>();
  Rng rng(22);
  auto inst = random_instance(rng, 20, 10, 4);
  auto a = total_loss(model, inst).values();
  auto b = total_loss(as_float, inst).values();
  EXPECT_NEAR(a.total, b.total, 1e-4);
}

TEST(Dropout, TrainingModeNeedsRngAndChangesOutput) {
  auto c = tiny();
  c.dropout = 0.3;
  Model<double> model(c, 23);
  Rng rng(23);
  auto inst = random_instance(rng, 20, 10, 4);
  EXPECT_THROW(model.forward(inst.ids, inst.m, {.training = true}), ContractError);
  Rng drop(1);
  auto train = model.forward(inst.ids, inst.m, {.training = true, .rng = &drop});
  auto eval = model.forward(inst.ids, inst.m);
  auto eval2 = model.forward(inst.ids, inst.m);
  EXPECT_GT(max_abs_diff(train.logits, testing::reference_forward(model, inst.ids, inst.m).logits), 0.0);
  EXPECT_LT(max_abs_diff(eval.logits, testing::reference_forward(model, inst.ids, inst.m).logits), 1e-10);
  for (std::size_t i = 0; i < eval.logits.size(); ++i) EXPECT_EQ(eval.logits[i], eval2.logits[i]);
}

}  // namespace
}  // namespace rplm
