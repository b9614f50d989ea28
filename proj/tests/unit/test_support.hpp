#pragma once

#include <cstdint>

#include "taca/ops.hpp"
#include "taca/rng.hpp"
#include "taca/tensor.hpp"

namespace taca::testing {

// sum(t * w) with w drawn from a fixed seed; turns any tensor-valued program
// into a scalar one whose gradient exercises every output element.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = rng.uniform_tensor(t.shape(), 0.5, 1.5);
  return sum(mul(t, w));
}

inline Tensor random_unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  NoGradScope no_grad;
  return l2_normalize_rows(rng.normal_tensor({rows, cols}, 1.0));
}

}  // namespace taca::testing
