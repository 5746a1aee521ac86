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

#include <vector>

#include "rplm/corpus.hpp"
#include "rplm/grad_check.hpp"
#include "rplm/model.hpp"

namespace rplm {

/// Gradient check of the full training loss. Gradients come from backward()
/// on the 64-bit model; the reference differences are taken on an
/// extended-precision copy so that tiny gradients are resolved.
inline GradCheckReport grad_check_total_loss(Model<double>& model, const TrainingInstance& inst,
                                             long double eps = 1e-5L) {
  if (model.config().dropout != 0.0) {
    throw ContractError("grad_check_total_loss: dropout must be disabled");
  }
  model.zero_grad();
  total_loss(model, inst).total.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : model.parameters()) analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());

  const auto reference = model.template cast<long double>();
  auto params = reference.parameters();
  NoGradGuard no_grad;
  return compare_gradients(
      analytic,
      [&](std::size_t t, std::size_t i, long double delta) {
        auto data = params[t].tensor.mutable_data();
        const long double saved = data[i];
        data[i] = saved + delta;
        const long double v = total_loss(reference, inst).total.item();
        data[i] = saved;
        return v;
      },
      eps);
}

}  // namespace rplm
