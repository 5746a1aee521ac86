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

#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>
#include <vector>

#include "rplm/checkpoint.hpp"
#include "rplm/optim.hpp"
#include "rplm/trainer.hpp"

namespace rplm {
namespace {

ModelConfig tiny(std::size_t vocab = 20) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ff_size = 16;
  c.vocab_size = vocab;
  c.max_seq_len = 24;
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
  inst.y_src[rng.below(m - 1)] = 1;
  inst.topic_ids = {static_cast<TokenId>(special::kCount + rng.below(vocab - special::kCount))};
  return inst;
}

std::vector<TrainingInstance> random_set(std::uint64_t seed, std::size_t count) {
  Rng rng(seed);
  std::vector<TrainingInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t m = 3 + rng.below(4);
    out.push_back(random_instance(rng, 20, m + 2 + rng.below(6), m));
  }
  return out;
}

template <typename T>
std::vector<std::vector<T>> values_of(const Model<T>& model) {
  std::vector<std::vector<T>> out;
  for (const auto& p : model.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

// ---------------------------------------------------------------------------
// Schedule

TEST(Schedule, LinearWarmupThenConstant) {
  EXPECT_DOUBLE_EQ(lr_at(5000, 1e-4, 10000), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(10000, 1e-4, 10000), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(25000, 1e-4, 10000), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(1, 1e-4, 10000), 1e-8);
  EXPECT_THROW(lr_at(0, 1e-4, 10), ParameterError);
}

TEST(Schedule, ContinuousAtWarmupBoundary) {
  for (std::size_t w : {1u, 7u, 100u, 10000u}) {
    EXPECT_DOUBLE_EQ(lr_at(w, 3e-3, w), 3e-3);
    EXPECT_NEAR(lr_at(w + 1, 3e-3, w), lr_at(w, 3e-3, w), 3e-3 / static_cast<double>(w));
    EXPECT_NEAR(lr_at(w + 1, 3e-3, w, 10 * w + 10), lr_at(w, 3e-3, w), 3e-3 / static_cast<double>(w));
  }
}

TEST(Schedule, OptionalLinearDecay) {
  EXPECT_DOUBLE_EQ(lr_at(15, 1.0, 10, 20), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(20, 1.0, 10, 20), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(30, 1.0, 10, 20), 0.0);
}

TEST(TrainConfig, DefaultsAndValidation) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.warmup_steps, 10000u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.max_epochs, 20u);
  EXPECT_DOUBLE_EQ(c.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.adam_eps, 1e-8);
  EXPECT_DOUBLE_EQ(c.clip_norm, 1.0);
  c.warmup_steps = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = {};
  c.lr = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = {};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ParameterError);
}

// ---------------------------------------------------------------------------
// Adam

std::vector<NamedTensor<double>> single_param(std::vector<double> values, std::vector<double> grad) {
  const std::size_t n = values.size();
  Tensor<double> t({n}, std::move(values), true);
  t.zero_grad();
  std::copy(grad.begin(), grad.end(), t.mutable_grad().begin());
  return {{"w", t}};
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto params = single_param({0.5, -2.0, 3.0}, {1, 1, 1});
  Adam<double> opt;
  opt.step(params, 1e-3);
  for (std::size_t i = 0; i < 3; ++i) {
    const double before[] = {0.5, -2.0, 3.0};
    EXPECT_NEAR(params[0].tensor[i], before[i] - 1e-3, 1e-10);
  }
  EXPECT_EQ(opt.step_count(), 1u);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.1, 1e-15);
  EXPECT_NEAR(opt.second_moments()[0][0], 0.001, 1e-15);
}

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
  Adam<double> opt;
  auto params = single_param({1.0}, {0.0});
  opt.step(params, 1e-2);
  EXPECT_EQ(params[0].tensor[0], 1.0);

  auto moved = single_param({1.0}, {2.0});
  Adam<double> warm;
  warm.step(moved, 1e-2);
  const double m1 = warm.first_moments()[0][0], v1 = warm.second_moments()[0][0];
  std::fill(moved[0].tensor.mutable_grad().begin(), moved[0].tensor.mutable_grad().end(), 0.0);
  const double w1 = moved[0].tensor[0];
  warm.step(moved, 0.0);
  EXPECT_EQ(moved[0].tensor[0], w1);
  EXPECT_NEAR(warm.first_moments()[0][0], 0.9 * m1, 1e-15);
  EXPECT_NEAR(warm.second_moments()[0][0], 0.999 * v1, 1e-15);
}

TEST(Adam, NonFiniteGradientAbortsStep) {
  auto params = single_param({1.0, 2.0}, {0.5, std::nan("")});
  Adam<double> opt;
  EXPECT_THROW(opt.step(params, 1e-2), NumericError);
  EXPECT_EQ(params[0].tensor[0], 1.0);
  EXPECT_EQ(params[0].tensor[1], 2.0);
  EXPECT_EQ(opt.step_count(), 0u);
  params = single_param({1.0}, {INFINITY});
  EXPECT_THROW(opt.step(params, 1e-2), NumericError);
}

TEST(Adam, GlobalNormClipping) {
  auto params = single_param({0.0, 0.0}, {3.0, 4.0});
  Adam<double> opt;
  EXPECT_DOUBLE_EQ(opt.step(params, 1e-3, 1.0), 5.0);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(opt.first_moments()[0][1], 0.1 * 0.8, 1e-15);
  auto unclipped = single_param({0.0, 0.0}, {3.0, 4.0});
  Adam<double> plain;
  plain.step(unclipped, 1e-3, 10.0);
  EXPECT_NEAR(plain.first_moments()[0][0], 0.3, 1e-15);
}

TEST(Adam, SmallStepDescendsOnFixedBatch) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model<double> model(tiny(), seed);
    auto batch = random_set(seed + 100, 4);
    auto batch_loss = [&] {
      double total = 0;
      for (const auto& inst : batch) total += total_loss(model, inst).total.item();
      return total;
    };
    const double before = batch_loss();
    model.zero_grad();
    for (const auto& inst : batch) total_loss(model, inst).total.backward();
    Adam<double> opt;
    opt.step(model.parameters(), 1e-6);
    EXPECT_LT(batch_loss(), before) << "seed " << seed;
  }
}

// ---------------------------------------------------------------------------
// Batching

TEST(Batching, PadsToLongest) {
  auto set = random_set(3, 3);
  std::vector<const TrainingInstance*> ptrs{&set[0], &set[1], &set[2]};
  auto batch = pad_batch(ptrs);
  std::size_t longest = 0;
  for (const auto& i : set) longest = std::max(longest, i.ids.size());
  for (std::size_t i = 0; i < 3; ++i) {
    ASSERT_EQ(batch[i].ids.size(), longest);
    EXPECT_EQ(batch[i].n, set[i].n);
    for (std::size_t j = set[i].n; j < longest; ++j) EXPECT_EQ(batch[i].ids[j], special::kPad);
  }
}

TEST(Batching, PaddingDoesNotChangeLosses) {
  Model<float> model(tiny(), 4);
  auto set = random_set(4, 10);
  for (const auto& inst : set) {
    auto padded = inst;
    padded.ids.resize(inst.ids.size() + 5, special::kPad);
    auto a = total_loss(model, inst);
    auto b = total_loss(model, padded);
    EXPECT_NEAR(a.mle.item(), b.mle.item(), 1e-5);
    EXPECT_NEAR(a.src.item(), b.src.item(), 1e-5);
    EXPECT_NEAR(a.kwd.item(), b.kwd.item(), 1e-5);
    for (std::size_t r = 0; r < inst.n + 1; ++r)
      for (std::size_t c = 0; c < 20; ++c) EXPECT_NEAR(a.trace.logits.at(r, c), b.trace.logits.at(r, c), 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Training loop

TrainConfig quick_config() {
  TrainConfig c;
  c.lr = 3e-3;
  c.warmup_steps = 5;
  c.batch_size = 4;
  c.max_epochs = 1000;
  c.max_steps = 12;
  c.eval_interval = 4;
  c.seed = 9;
  return c;
}

TEST(Train, LogsEveryIntervalAndKeepsBest) {
  Model<float> model(tiny(), 5);
  Adam<float> opt;
  auto train_set = random_set(5, 12), valid_set = random_set(6, 4);
  auto result = train(model, opt, train_set, valid_set, quick_config());
  EXPECT_EQ(result.steps, 12u);
  ASSERT_EQ(result.log.size(), 3u);
  EXPECT_EQ(result.log[0].step, 4u);
  EXPECT_EQ(result.log[2].step, 12u);
  EXPECT_EQ(result.batch_losses.size(), 12u);
  ASSERT_TRUE(result.best.has_value());
  double best = INFINITY;
  for (const auto& r : result.log) best = std::min(best, r.valid.total);
  EXPECT_EQ(result.best_valid, best);
  for (const auto& r : result.log) EXPECT_NEAR(r.valid.total, r.valid.mle + r.valid.src + 0.2 * r.valid.kwd, 1e-5);
}

TEST(Train, IntervalBeyondBudgetEvaluatesFinalState) {
  Model<float> model(tiny(), 6);
  Adam<float> opt;
  auto cfg = quick_config();
  cfg.eval_interval = 1000;
  auto train_set = random_set(7, 8), valid_set = random_set(8, 3);
  auto result = train(model, opt, train_set, valid_set, cfg);
  ASSERT_EQ(result.log.size(), 1u);
  EXPECT_EQ(result.log[0].step, 12u);
  ASSERT_TRUE(result.best.has_value());
  EXPECT_EQ(result.best->step, 12u);
  EXPECT_EQ(result.best->params, values_of(model));
}

TEST(Train, SameSeedSameRun) {
  auto train_set = random_set(9, 10), valid_set = random_set(10, 3);
  auto cfg = quick_config();
  auto c = tiny();
  c.dropout = 0.1;
  Model<float> a(c, 11), b(c, 11);
  Adam<float> oa, ob;
  auto ra = train(a, oa, train_set, valid_set, cfg);
  auto rb = train(b, ob, train_set, valid_set, cfg);
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(format_metrics(ra.log[i]), format_metrics(rb.log[i]));
  EXPECT_EQ(values_of(a), values_of(b));
}

TEST(Train, EpochsBoundTrainingWithoutStepLimit) {
  Model<float> model(tiny(), 12);
  Adam<float> opt;
  auto cfg = quick_config();
  cfg.max_steps = 0;
  cfg.max_epochs = 2;
  auto train_set = random_set(12, 10), valid_set = random_set(13, 2);
  EXPECT_EQ(train(model, opt, train_set, valid_set, cfg).steps, 6u);
}

TEST(Train, DivergenceKeepsLastGoodState) {
  Model<float> model(tiny(), 13);
  Adam<float> opt;
  auto cfg = quick_config();
  cfg.eval_interval = 1;
  auto train_set = random_set(14, 8), valid_set = random_set(15, 2);
  auto result = train(model, opt, train_set, valid_set, cfg, [&](std::size_t step, const LossBreakdown&) {
    if (step == 3) model.parameters()[0].tensor.mutable_data()[model.parameters()[0].tensor.size() - 1] = NAN;
    return true;
  });
  EXPECT_TRUE(result.diverged);
  EXPECT_EQ(result.steps, 3u);
  ASSERT_TRUE(result.best.has_value());
  for (const auto& p : result.best->params)
    for (float v : p) EXPECT_TRUE(std::isfinite(v));
}

TEST(Train, EmptySplitsRejected) {
  Model<float> model(tiny(), 1);
  Adam<float> opt;
  auto set = random_set(1, 2);
  EXPECT_THROW(train(model, opt, std::span<const TrainingInstance>{}, set, quick_config()), EmptyInputError);
  EXPECT_THROW(train(model, opt, set, std::span<const TrainingInstance>{}, quick_config()), EmptyInputError);
}

TEST(Train, ResumedOptimizerContinuesStepCounter) {
  auto train_set = random_set(16, 8), valid_set = random_set(17, 2);
  auto cfg = quick_config();
  cfg.max_steps = 5;
  Model<float> model(tiny(), 16);
  Adam<float> opt;
  train(model, opt, train_set, valid_set, cfg);
  std::stringstream ss;
  write_checkpoint(ss, model, &opt, cfg, 16);
  auto loaded = read_checkpoint(ss);
  EXPECT_EQ(loaded.optimizer.step_count(), 5u);
  cfg.max_steps = 9;
  auto result = train(loaded.model, loaded.optimizer, train_set, valid_set, cfg);
  EXPECT_EQ(result.steps, 9u);
  EXPECT_EQ(result.batch_losses.size(), 4u);
  EXPECT_EQ(result.log.front().step, 8u);
}

TEST(Train, OverfitsSingleSequence) {
  auto c = tiny();
  c.hidden = 16;
  c.ff_size = 32;
  Model<float> model(c, 18);
  Adam<float> opt;
  Rng rng(18);
  std::vector<TrainingInstance> one{random_instance(rng, 20, 10, 4)};
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.warmup_steps = 10;
  cfg.batch_size = 1;
  cfg.max_epochs = 100000;
  cfg.max_steps = 400;
  cfg.eval_interval = 400;
  train(model, opt, one, one, cfg);
  EXPECT_LT(lm_loss(model.forward(one[0].ids, one[0].m).logits, one[0].ids).item(), 0.01);
}

TEST(MetricsLog, SixTabSeparatedFields) {
  const std::string line = format_metrics({42, {1.5, 0.25, 3.0, 2.35}, 1e-4});
  EXPECT_EQ(line, "42\t1.500000\t0.250000\t3.000000\t2.350000\t0.0001");
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Saved {
  std::string bytes;
  Model<float> model;
  Adam<float> opt;
};

Saved trained_checkpoint() {
  Model<float> model(tiny(), 20);
  Adam<float> opt;
  auto set = random_set(20, 6);
  auto cfg = quick_config();
  cfg.max_steps = 3;
  train(model, opt, set, set, cfg);
  std::ostringstream os;
  write_checkpoint(os, model, &opt, cfg, 77);
  return {os.str(), model, opt};
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto saved = trained_checkpoint();
  std::istringstream is(saved.bytes);
  auto loaded = read_checkpoint(is);
  EXPECT_TRUE(loaded.model.config() == saved.model.config());
  EXPECT_EQ(values_of(loaded.model), values_of(saved.model));
  EXPECT_EQ(loaded.optimizer.first_moments(), saved.opt.first_moments());
  EXPECT_EQ(loaded.optimizer.second_moments(), saved.opt.second_moments());
  EXPECT_EQ(loaded.optimizer.step_count(), 3u);
  EXPECT_EQ(loaded.header.seed, 77u);
  auto cfg = quick_config();
  cfg.max_steps = 3;
  EXPECT_TRUE(loaded.header.train == cfg);

  Rng rng(1);
  auto inst = random_instance(rng, 20, 12, 5);
  auto a = saved.model.forward(inst.ids, inst.m).logits;
  auto b = loaded.model.forward(inst.ids, inst.m).logits;
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(std::bit_cast<std::uint32_t>(a[i]), std::bit_cast<std::uint32_t>(b[i]));

  std::ostringstream again;
  write_checkpoint(again, loaded.model, &loaded.optimizer, loaded.header.train, loaded.header.seed);
  EXPECT_EQ(again.str(), saved.bytes);
}

TEST(Checkpoint, ByteLayout) {
  auto saved = trained_checkpoint();
  const std::string& b = saved.bytes;
  auto u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[at + i]);
    return v;
  };
  EXPECT_EQ(b.substr(0, 4), "RPLM");
  EXPECT_EQ(u32(4), 1u);
  const std::uint32_t header_len = u32(8);
  const std::string header = b.substr(12, header_len);
  EXPECT_NE(header.find("model.layers=2\n"), std::string::npos);
  EXPECT_NE(header.find("step=3\n"), std::string::npos);
  std::size_t at = 12 + header_len;
  const std::size_t name_len = static_cast<unsigned char>(b[at]) | (static_cast<unsigned char>(b[at + 1]) << 8);
  EXPECT_EQ(b.substr(at + 2, name_len), "embed.token");
  at += 2 + name_len;
  EXPECT_EQ(static_cast<int>(b[at]), 2);
  EXPECT_EQ(u32(at + 1), 20u);
  EXPECT_EQ(u32(at + 5), 8u);
  float first;
  const std::uint32_t raw = u32(at + 9);
  std::memcpy(&first, &raw, 4);
  EXPECT_EQ(first, saved.model.token_embedding()[0]);
}

TEST(Checkpoint, CorruptMagicOrVersion) {
  auto saved = trained_checkpoint();
  std::string bad = saved.bytes;
  bad[0] = 'X';
  std::istringstream a(bad);
  EXPECT_THROW(read_checkpoint(a), FormatError);
  bad = saved.bytes;
  bad[4] = 9;
  std::istringstream b(bad);
  EXPECT_THROW(read_checkpoint(b), FormatError);
}

TEST(Checkpoint, TruncationNamesTheRecord) {
  auto saved = trained_checkpoint();
  for (std::size_t cut : {std::size_t{6}, std::size_t{20}, saved.bytes.size() / 2, saved.bytes.size() - 1}) {
    std::istringstream is(saved.bytes.substr(0, cut));
    EXPECT_THROW(read_checkpoint(is), FormatError) << cut;
  }
  std::istringstream is(saved.bytes.substr(0, saved.bytes.size() - 3));
  try {
    read_checkpoint(is);
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("adam.v.gate.bias"), std::string::npos) << e.what();
  }
  std::istringstream trailing(saved.bytes + "x");
  EXPECT_THROW(read_checkpoint(trailing), FormatError);
}

TEST(Checkpoint, ConfigurationMismatch) {
  auto saved = trained_checkpoint();
  auto larger = tiny();
  larger.hidden = 16;
  std::istringstream is(saved.bytes);
  try {
    read_checkpoint(is, &larger);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("embed.token"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, HeaderShapeDisagreement) {
  auto saved = trained_checkpoint();
  std::string bytes = saved.bytes;
  const auto pos = bytes.find("model.ff_size=16");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 16, "model.ff_size=32");
  std::istringstream is(bytes);
  EXPECT_THROW(read_checkpoint(is), FormatError);
}

TEST(Checkpoint, WithoutOptimizer) {
  Model<float> model(tiny(), 21);
  std::ostringstream os;
  write_checkpoint(os, model, nullptr, TrainConfig{}, 3);
  std::istringstream is(os.str());
  auto loaded = read_checkpoint(is);
  EXPECT_FALSE(loaded.header.has_optimizer);
  EXPECT_EQ(values_of(loaded.model), values_of(model));
}

}  // namespace
}  // namespace rplm
