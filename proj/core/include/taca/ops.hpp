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

#include <cstddef>
#include <span>
#include <string_view>

#include "taca/tensor.hpp"

// Differentiable primitives. Every op records itself on the active tape when
// at least one input requires a gradient. Matrix ops view a tensor as
// rows() x cols(), i.e. all leading dimensions folded into rows. There is no
// implicit broadcasting; add_bias and add_tiled are the explicit exceptions.
namespace taca {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kLayerNormEpsilon = 1e-5;

enum class Activation { kRelu, kGelu };

// Accepts "relu" or "gelu"; anything else is a ParameterError.
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

// [m x k] . [k x n] -> [m x n]. Both operands must be rank 2.
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] . [n x k]^T -> [m x n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adds a vector of length cols() to every row.
Tensor add_bias(const Tensor& a, const Tensor& bias);
// a is [g*t x n], pattern is [t x n]; pattern is added to each block of t rows.
Tensor add_tiled(const Tensor& a, const Tensor& pattern);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row-wise softmax of a / temperature, max-subtracted.
Tensor softmax_rows(const Tensor& a, double temperature);
Tensor l2_normalize_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);

Tensor activation(const Tensor& a, Activation kind);
Tensor relu(const Tensor& a);
// Exact form x * Phi(x).
Tensor gelu(const Tensor& a);

// Mean over rows of -log softmax(row)[target]; returns a scalar.
Tensor cross_entropy_rows(const Tensor& logits,
                          std::span<const std::size_t> targets);

Tensor select_rows(const Tensor& a, std::span<const std::size_t> indices);
Tensor concat_rows(std::span<const Tensor> parts);
// a is [groups*t x n]; inserts `row` (n values) before each group of t rows.
Tensor prepend_rows(const Tensor& a, const Tensor& row, std::size_t groups);

// Bidirectional scaled dot-product attention. q, k, v are [groups*t x width];
// each group is an independent sequence and width is split into `heads`.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t groups, std::size_t heads);

}  // namespace taca
