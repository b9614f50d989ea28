// Copyright 2026 The TaCA Lab Authors.
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

#include "taca/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "taca/errors.hpp"

namespace taca {

namespace {

double evaluate(const ScalarProgram& program, const Tensor& x) {
  NoGradScope no_grad;
  const Tensor y = program(x);
  if (y.numel() != 1) {
    throw ContractError("grad_check: program must return a scalar, got " +
                        shape_string(y.shape()));
  }
  return y.item();
}

}  // namespace

double grad_check(const ScalarProgram& program, const Tensor& point, double step) {
  if (!(step >= 1e-7 && step <= 1e-4)) {
    throw ParameterError("grad_check: step must lie in [1e-7, 1e-4], got " +
                         std::to_string(step));
  }
  Tensor x = Tensor::from_values(point.shape(),
                                 {point.values().begin(), point.values().end()},
                                 /*trainable=*/true);
  std::vector<double> analytic;
  {
    TapeScope scope;
    const Tensor y = program(x);
    if (y.numel() != 1) {
      throw ContractError("grad_check: program must return a scalar, got " +
                          shape_string(y.shape()));
    }
    if (y.requires_grad()) {
      scope.tape().backward(y);
    }
    if (x.has_grad()) {
      analytic.assign(x.grad().begin(), x.grad().end());
    } else {
      analytic.assign(x.numel(), 0.0);
    }
  }

  std::vector<double> probe(point.values().begin(), point.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double up = evaluate(program, Tensor::from_values(point.shape(), probe));
    probe[i] = saved - step;
    const double down = evaluate(program, Tensor::from_values(point.shape(), probe));
    probe[i] = saved;
    const double central = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - central) /
                       (std::abs(analytic[i]) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

bool near_kink(const Tensor& point, double margin) {
  return std::any_of(point.values().begin(), point.values().end(),
                     [margin](double v) { return std::abs(v) <= margin; });
}

}  // namespace taca
