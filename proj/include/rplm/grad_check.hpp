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
#include <functional>
#include <span>
#include <vector>

#include "rplm/errors.hpp"
#include "rplm/tensor.hpp"

namespace rplm {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Loss with coordinate `index` of tensor `tensor` shifted by `delta`.
using PerturbedLoss = std::function<long double(std::size_t tensor, std::size_t index, long double delta)>;

/// Compares analytic gradients against central differences of `perturbed`.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport compare_gradients(std::span<const std::vector<double>> analytic,
                                         const PerturbedLoss& perturbed, long double eps) {
  if (!(eps > 0.0L)) throw ParameterError("grad_check: eps must be positive");
  GradCheckReport report;
  for (std::size_t t = 0; t < analytic.size(); ++t) {
    for (std::size_t i = 0; i < analytic[t].size(); ++i) {
      const long double plus = perturbed(t, i, eps);
      const long double minus = perturbed(t, i, -eps);
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite loss at perturbed point");
      }
      const double numeric = static_cast<double>((plus - minus) / (2.0L * eps));
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++report.coordinates;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_tensor = t;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

/// Compares backward() against central differences for every coordinate of
/// `params`. `loss` must rebuild the graph from the current parameter values
/// on each call.
inline GradCheckReport grad_check_report(const std::function<Tensor<double>()>& loss,
                                         std::span<Tensor<double>> params, double eps) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<double> value = loss();
  if (!std::isfinite(value.item())) throw NumericError("grad_check: non-finite loss");
  value.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  return compare_gradients(
      analytic,
      [&](std::size_t t, std::size_t i, long double delta) -> long double {
        auto data = params[t].mutable_data();
        const double saved = data[i];
        data[i] = saved + static_cast<double>(delta);
        const double v = loss().item();
        data[i] = saved;
        return v;
      },
      eps);
}

inline double grad_check(const std::function<Tensor<double>()>& loss,
                         std::span<Tensor<double>> params, double eps) {
  return grad_check_report(loss, params, eps).max_relative_error;
}

/// Single-point form: f maps the point to a scalar.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& point, double eps) {
  Tensor<double> x(point.dims(), std::vector<double>(point.data().begin(), point.data().end()),
                   true);
  std::vector<Tensor<double>> params{x};
  return grad_check([&] { return f(x); }, params, eps);
}

}  // namespace rplm
