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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rplm/errors.hpp"
#include "rplm/model.hpp"

namespace rplm {

struct TrainConfig {
  double lr = 1e-4;                  // peak learning rate
  std::size_t warmup_steps = 10000;
  bool lr_decay = false;             // linear decay to zero after warmup
  std::size_t batch_size = 32;
  std::size_t max_epochs = 20;
  std::size_t max_steps = 0;         // 0: bounded by epochs only
  std::size_t eval_interval = 30000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;            // 0 disables clipping
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr > 0.0)) throw ParameterError("lr must be positive");
    if (warmup_steps < 1) throw ParameterError("warmup_steps must be >= 1");
    if (batch_size < 1 || max_epochs < 1 || eval_interval < 1) {
      throw ParameterError("batch_size, max_epochs and eval_interval must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ParameterError("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ParameterError("adam_eps must be positive");
    if (clip_norm < 0.0) throw ParameterError("clip_norm must be non-negative");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup to `peak` over `warmup` steps, then constant; with
/// `decay_until` > warmup, linear decay to zero at that step instead.
inline double lr_at(std::size_t step, double peak, std::size_t warmup,
                    std::size_t decay_until = 0) {
  if (step < 1) throw ParameterError("lr_at: steps are 1-based");
  if (step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (decay_until > warmup) {
    if (step >= decay_until) return 0.0;
    return peak * static_cast<double>(decay_until - step) /
           static_cast<double>(decay_until - warmup);
  }
  return peak;
}

/// Global L2 norm of all gradients.
template <typename T>
double grad_norm(std::span<const NamedTensor<T>> params) {
  double total = 0.0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(total);
}

/// Bias-corrected Adam with optional global-norm gradient clipping.
template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  explicit Adam(const TrainConfig& cfg) : Adam(cfg.beta1, cfg.beta2, cfg.adam_eps) {}

  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t step) { step_ = step; }

  /// First/second moment buffers, aligned with the parameter order.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

  void ensure_state(std::span<const NamedTensor<T>> params) {
    if (m_.size() == params.size()) return;
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.size(), T(0));
      v_.emplace_back(p.tensor.size(), T(0));
    }
  }

  /// Applies one update. Throws NumericError, leaving parameters and state
  /// untouched, when any gradient is non-finite. Returns the pre-clip
  /// gradient norm.
  double step(std::span<const NamedTensor<T>> params, double lr, double clip_norm = 0.0) {
    ensure_state(params);
    for (const auto& p : params) {
      if (p.tensor.grad().size() != p.tensor.size()) {
        throw ContractError("adam: parameter '" + p.name + "' has no gradient buffer");
      }
      for (T g : p.tensor.grad()) {
        if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in '" + p.name + "'");
      }
    }
    const double norm = grad_norm(params);
    const double clip = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(beta1_, t);
    const double c2 = 1.0 - std::pow(beta2_, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> tensor = params[i].tensor;
      auto w = tensor.mutable_data();
      auto g = tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj;
        const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + eps_);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
      }
    }
    return norm;
  }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace rplm
