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

#include "taca/rng.hpp"

#include <numeric>

namespace taca {

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Fisher-Yates with our own index draw so the order only depends on the
  // engine, not on the library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[index(i)]);
  }
  return order;
}

Tensor Rng::normal_tensor(Shape shape, double stddev, bool trainable) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(0.0, stddev);
  return Tensor::from_values(std::move(shape), std::move(v), trainable);
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi, bool trainable) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(lo, hi);
  return Tensor::from_values(std::move(shape), std::move(v), trainable);
}

}  // namespace taca
