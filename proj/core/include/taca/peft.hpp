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
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "taca/encoder.hpp"
#include "taca/ops.hpp"

// Task-agnostic compatible adapters: residual bottleneck adapters inside the
// frozen new visual encoder plus a two-layer projector into the old
// embedding space. LoRA on the query/value projections is the alternative
// parameter-efficient variant.
namespace taca {

enum class PeftVariant { kAdapter, kLora };

PeftVariant parse_variant(std::string_view name);
std::string_view variant_name(PeftVariant variant);

struct TacaConfig {
  PeftVariant variant = PeftVariant::kAdapter;
  std::size_t bottleneck = 16;  // adapter d'
  std::size_t rank = 4;         // LoRA r
  double lora_alpha = 4.0;
  // 1-based block indices.
  std::vector<std::size_t> inserted_layers{1, 2, 3, 4};
  std::size_t adapters_per_block = 1;
  std::size_t projector_hidden = 64;
  Activation activation = Activation::kRelu;

  // Throws ConfigError unless the config fits an encoder with `layers`
  // blocks of width `width`.
  void validate(std::size_t layers, std::size_t width) const;

  bool operator==(const TacaConfig&) const = default;
};

// x + sigma(x . w_down + b_down) . w_up + b_up
struct Adapter {
  Tensor w_down;  // [k x d']
  Tensor b_down;  // [d']
  Tensor w_up;    // [d' x k]
  Tensor b_up;    // [k]
  Activation activation = Activation::kRelu;
};

Tensor adapter_forward(const Adapter& adapter, const Tensor& x);

struct DimensionProjector {
  Tensor w1;  // [d_n x d_p]
  Tensor b1;  // [d_p]
  Tensor w2;  // [d_p x d_o]
  Tensor b2;  // [d_o]
  Activation activation = Activation::kRelu;

  std::size_t input_dim() const { return w1.dim(0); }
  std::size_t output_dim() const { return w2.dim(1); }
};

// Two-layer MLP followed by row normalization. Accepts [B x d_n] or [d_n].
Tensor projector_forward(const DimensionProjector& projector, const Tensor& v);

// Effective weight base + (alpha / rank) * a . b, applied as y = W_eff . x to
// each row x.
struct LoRAModule {
  Tensor base;  // [m x n], frozen
  Tensor a;     // [m x r]
  Tensor b;     // [r x n]
  std::size_t rank = 1;
  double alpha = 1.0;
};

// x is [N x n]; returns [N x m].
Tensor lora_forward(const LoRAModule& module, const Tensor& x);

struct BlockAdapters {
  std::optional<Adapter> attention;  // only with adapters_per_block == 2
  std::optional<Adapter> ffn;
};

struct BlockLora {
  LoRAModule query;
  LoRAModule value;
};

// Everything TaCA adds on top of a frozen encoder. Implements the block hooks
// the encoder exposes, so a forward pass with the attachment is the adapted
// encoder.
class TacaAttachment : public BlockHooks {
 public:
  TacaConfig config;
  std::map<std::size_t, BlockAdapters> adapters;  // 0-based layer
  std::map<std::size_t, BlockLora> lora;          // 0-based layer
  DimensionProjector projector;

  Tensor after_attention(std::size_t layer, const Tensor& out) const override;
  Tensor after_ffn(std::size_t layer, const Tensor& out) const override;
  Tensor project_query(std::size_t layer, const Tensor& x,
                       const BlockWeights& w) const override;
  Tensor project_value(std::size_t layer, const Tensor& x,
                       const BlockWeights& w) const override;

  // Names start with "adapter.", "lora." or "dim_projector."; layers 1-based.
  NamedTensors named_tensors() const;
  std::size_t adapter_count() const;
  // First 0-based block whose computation the attachment changes.
  std::size_t first_touched_layer() const;
};

// Freezes every tensor of `encoder` and builds a trainable attachment. Up
// projections start at zero so each adapter is initially the identity.
TacaAttachment attach_taca(const VisualEncoderWeights& encoder, const TacaConfig& config,
                           std::size_t old_dim, std::uint64_t seed);

// Rebuilds an attachment from stored tensors, wiring LoRA bases to `encoder`.
TacaAttachment attachment_from_named(const VisualEncoderWeights& encoder,
                                     const TacaConfig& config, std::size_t old_dim,
                                     const NamedTensors& tensors);

// Adapted encoder followed by the projector: [B x d_o] unit rows.
Tensor encode_compatible(const VisualEncoderWeights& encoder,
                         const TacaAttachment& attachment, std::span<const Image> images);
// Same, resuming from hidden states cached at the input of block `first`.
Tensor encode_compatible_from(const VisualEncoderWeights& encoder,
                              const TacaAttachment& attachment, const Tensor& hidden,
                              std::size_t groups, std::size_t first);

struct ParamCount {
  // Weight matrices only: apb * 2 * |layers| * k * d' + d_n * d_p + d_p * d_o
  // (LoRA: |layers| * 2 * r * 2k + projector weights).
  std::size_t formula = 0;
  // Adds every bias term.
  std::size_t exact = 0;
  bool rank_based = false;
};

ParamCount count_trainable(const TacaConfig& config, const VisualEncoderConfig& encoder,
                           std::size_t old_dim);

}  // namespace taca
