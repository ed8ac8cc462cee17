// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "xlnet/tensor.hpp"

namespace xlnet {

/// Central-difference gradient of a scalar function, one coordinate at a time.
/// The function must be deterministic; `point` is perturbed in a local copy.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                     double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  Tensor x = point;
  Tensor grad(point.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::runtime_error("finite_difference_grad: non-finite function value at coordinate " +
                               std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Largest coordinate-wise |a - b| / max(|a|, |b|, floor). The floor keeps
/// coordinates whose true gradient is ~0 from being judged on pure
/// finite-difference noise.
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-4) {
  if (analytic.shape() != numeric.shape()) {
    throw ShapeError("max_relative_error", analytic.shape(), numeric.shape());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace xlnet
