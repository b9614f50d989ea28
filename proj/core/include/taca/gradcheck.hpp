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

#pragma once

#include <functional>

#include "taca/tensor.hpp"

namespace taca {

using ScalarProgram = std::function<Tensor(const Tensor&)>;

// Compares reverse-mode gradients of `program` at `point` against central
// differences. Returns the max over coordinates of
//   |analytic - central| / (|analytic| + |central| + 1e-12).
// `step` must lie in [1e-7, 1e-4]; a non-scalar program is a ContractError.
double grad_check(const ScalarProgram& program, const Tensor& point,
                  double step = 1e-6);

// True when any coordinate of `point` lies within `margin` of zero. Used to
// reject sample points next to the relu kink.
bool near_kink(const Tensor& point, double margin);

}  // namespace taca
