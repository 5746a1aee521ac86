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

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rplm/corpus.hpp"
#include "rplm/errors.hpp"
#include "rplm/model.hpp"
#include "rplm/optim.hpp"
#include "rplm/random.hpp"

namespace rplm {

struct MetricsRecord {
  std::size_t step = 0;
  LossBreakdown valid;
  double lr = 0.0;
};

/// `step<TAB>lmle<TAB>lsrc<TAB>lkwd<TAB>total<TAB>lr`
inline std::string format_metrics(const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6g", r.step, r.valid.mle,
                r.valid.src, r.valid.kwd, r.valid.total, r.lr);
  return buf;
}

/// Copies of the batch with ids right-padded with [PAD] to a common length.
inline std::vector<TrainingInstance> pad_batch(std::span<const TrainingInstance* const> batch) {
  std::size_t longest = 0;
  for (const auto* inst : batch) longest = std::max(longest, inst->ids.size());
  std::vector<TrainingInstance> out;
  out.reserve(batch.size());
  for (const auto* inst : batch) {
    out.push_back(*inst);
    out.back().ids.resize(longest, special::kPad);
  }
  return out;
}

/// Mean loss breakdown over a set of instances, dropout off.
template <typename T>
LossBreakdown evaluate(const Model<T>& model, std::span<const TrainingInstance> instances) {
  NoGradGuard no_grad;
  LossBreakdown acc;
  for (const auto& inst : instances) {
    const auto v = total_loss(model, inst).values();
    acc.mle += v.mle;
    acc.src += v.src;
    acc.kwd += v.kwd;
    acc.total += v.total;
  }
  const double inv = instances.empty() ? 0.0 : 1.0 / static_cast<double>(instances.size());
  return {acc.mle * inv, acc.src * inv, acc.kwd * inv, acc.total * inv};
}

/// Parameter values plus optimizer state at one step.
struct Snapshot {
  std::vector<std::vector<float>> params, first, second;
  std::uint64_t step = 0;

  static Snapshot take(const Model<float>& model, const Adam<float>& opt) {
    Snapshot s;
    for (const auto& p : model.parameters()) s.params.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    s.first = opt.first_moments();
    s.second = opt.second_moments();
    s.step = opt.step_count();
    return s;
  }

  void restore(Model<float>& model, Adam<float>& opt) const {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(this->params[i].begin(), this->params[i].end(), params[i].tensor.mutable_data().begin());
    }
    opt.first_moments() = first;
    opt.second_moments() = second;
    opt.set_step_count(step);
  }
};

struct TrainResult {
  std::vector<MetricsRecord> log;
  std::vector<LossBreakdown> batch_losses;  // one per optimizer step
  std::optional<Snapshot> best;
  double best_valid = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;  // final optimizer step counter
  bool diverged = false;
};

/// Return false to stop training after the current step.
using StepCallback = std::function<bool(std::size_t step, const LossBreakdown& batch)>;

/// Mini-batch training. Batches are drawn from a seeded shuffle each epoch
/// and padded to a common length; validation loss is computed every
/// eval_interval steps and after the final step, and the lowest-validation
/// state is kept in `best`. The optimizer's step counter is continued, so a
/// restored optimizer resumes the schedule; max_steps is absolute.
inline TrainResult train(Model<float>& model, Adam<float>& optimizer,
                         std::span<const TrainingInstance> train_set,
                         std::span<const TrainingInstance> valid_set, const TrainConfig& cfg,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  if (train_set.empty() || valid_set.empty()) {
    throw EmptyInputError("train: training and validation splits must be non-empty");
  }
  const auto params = model.parameters();
  optimizer.ensure_state(params);
  const std::size_t per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t budget =
      cfg.max_steps ? cfg.max_steps : optimizer.step_count() + per_epoch * cfg.max_epochs;
  const std::size_t decay_until = cfg.lr_decay ? budget : 0;

  Rng shuffle_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  ForwardOptions opts{true, &dropout_rng};
  TrainResult result;
  std::size_t step = optimizer.step_count();
  std::size_t last_eval = std::numeric_limits<std::size_t>::max();
  double last_lr = 0.0;

  auto run_eval = [&] {
    MetricsRecord rec{step, evaluate(model, valid_set), last_lr};
    result.log.push_back(rec);
    last_eval = step;
    if (rec.valid.total < result.best_valid) {
      result.best_valid = rec.valid.total;
      result.best = Snapshot::take(model, optimizer);
    }
  };

  std::vector<std::size_t> order(train_set.size());
  bool stop = step >= budget;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
      std::vector<const TrainingInstance*> members;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        members.push_back(&train_set[order[i]]);
      }
      const auto batch = pad_batch(members);
      const float inv = 1.0f / static_cast<float>(batch.size());
      model.zero_grad();
      LossBreakdown acc;
      try {
        for (const auto& inst : batch) {
          auto terms = total_loss(model, inst, opts);
          const auto v = terms.values();
          acc.mle += v.mle * inv;
          acc.src += v.src * inv;
          acc.kwd += v.kwd * inv;
          acc.total += v.total * inv;
          scale(terms.total, inv).backward();
        }
        last_lr = lr_at(step + 1, cfg.lr, cfg.warmup_steps, decay_until);
        optimizer.step(params, last_lr, cfg.clip_norm);
      } catch (const NumericError&) {
        result.diverged = true;
        stop = true;
        break;
      }
      ++step;
      result.batch_losses.push_back(acc);
      if (step % cfg.eval_interval == 0) run_eval();
      if (step >= budget) stop = true;
      if (on_step && !on_step(step, acc)) stop = true;
    }
  }
  if (!result.diverged && last_eval != step) run_eval();
  result.steps = step;
  return result;
}

}  // namespace rplm
