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
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "taca/tensor.hpp"

namespace taca {

struct ImageSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t patch = 4;

  // Throws SpecError unless every field is positive and patch divides both
  // height and width.
  void validate() const;
  std::size_t patch_count() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t pixel_count() const { return height * width * channels; }

  bool operator==(const ImageSpec&) const = default;
};

// Row-major H x W x C pixels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  bool operator==(const Image&) const = default;
};

using TokenSequence = std::vector<std::uint32_t>;

struct VisualEncoderConfig {
  ImageSpec image;
  std::size_t layers = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t embed_dim = 16;

  void validate() const;
  // Patches plus the class token.
  std::size_t sequence_length() const { return image.patch_count() + 1; }

  bool operator==(const VisualEncoderConfig&) const = default;
};

struct TextEncoderConfig {
  std::size_t vocab_size = 32;
  // Includes the [CLS] and [SEP] positions.
  std::size_t max_len = 12;
  std::size_t layers = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t embed_dim = 16;
  std::uint32_t cls_id = 1;
  std::uint32_t sep_id = 2;

  void validate() const;

  bool operator==(const TextEncoderConfig&) const = default;
};

// Pre-norm transformer block. Linear weights follow the [out x in] layout.
struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct VisualEncoderWeights {
  VisualEncoderConfig config;
  Tensor patch_embed;  // [width x patch_dim]
  Tensor cls_token;    // [width]
  Tensor pos_embed;    // [sequence_length x width]
  std::vector<BlockWeights> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor proj;  // [embed_dim x width]

  NamedTensors named_tensors() const;
};

struct TextEncoderWeights {
  TextEncoderConfig config;
  Tensor token_embed;  // [vocab_size x width]
  Tensor pos_embed;    // [max_len x width]
  std::vector<BlockWeights> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor proj;  // [embed_dim x width]

  NamedTensors named_tensors() const;
};

// Extension points inside each transformer block; `layer` is 0-based. The
// defaults reproduce the plain block.
class BlockHooks {
 public:
  virtual ~BlockHooks() = default;
  // Output of the attention sublayer, before its residual add.
  virtual Tensor after_attention(std::size_t layer, const Tensor& out) const;
  // Output of the feed-forward sublayer, before its residual add.
  virtual Tensor after_ffn(std::size_t layer, const Tensor& out) const;
  virtual Tensor project_query(std::size_t layer, const Tensor& x,
                               const BlockWeights& w) const;
  virtual Tensor project_value(std::size_t layer, const Tensor& x,
                               const BlockWeights& w) const;
};

// x . w^T + b for w in [out x in] layout.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// One block over `groups` sequences packed as [groups*t x width].
Tensor transformer_block(const BlockWeights& w, const Tensor& x, std::size_t groups,
                         std::size_t heads, std::size_t layer,
                         const BlockHooks* hooks = nullptr);

// Runs blocks [first, last) and appends each block output to `trace` if given.
Tensor run_blocks(std::span<const BlockWeights> blocks, const Tensor& x,
                  std::size_t groups, std::size_t heads, std::size_t first,
                  std::size_t last, const BlockHooks* hooks = nullptr,
                  std::vector<Tensor>* trace = nullptr);

// [(H*W/P^2) x (P^2*C)]: patches row-major over the grid, pixels row-major
// within a patch with channels innermost.
Tensor patchify(const Image& image, const ImageSpec& spec);
Tensor patchify_batch(std::span<const Image> images, const ImageSpec& spec);

// Patch embedding, class token and positions: [B*t x width], no blocks yet.
Tensor embed_images(const VisualEncoderWeights& w, std::span<const Image> images);
// Final class-token state -> layer norm -> projection -> unit rows [B x d].
Tensor visual_head(const VisualEncoderWeights& w, const Tensor& hidden,
                   std::size_t groups);

Tensor encode_images(const VisualEncoderWeights& w, std::span<const Image> images,
                     const BlockHooks* hooks = nullptr,
                     std::vector<Tensor>* trace = nullptr);
// Single image -> [embed_dim].
Tensor encode_image(const VisualEncoderWeights& w, const Image& image);

// Adds [CLS]/[SEP] and validates lengths and ids.
TokenSequence frame_tokens(const TextEncoderConfig& config, const TokenSequence& tokens);
Tensor encode_texts(const TextEncoderWeights& w, std::span<const TokenSequence> texts,
                    const BlockHooks* hooks = nullptr);
Tensor encode_text(const TextEncoderWeights& w, const TokenSequence& tokens);

VisualEncoderWeights init_visual_encoder(const VisualEncoderConfig& config,
                                         std::uint64_t seed);
TextEncoderWeights init_text_encoder(const TextEncoderConfig& config,
                                     std::uint64_t seed);

// Closed-form parameter counts.
std::size_t visual_parameter_count(const VisualEncoderConfig& config);
std::size_t text_parameter_count(const TextEncoderConfig& config);
std::size_t enumerate_parameters(const NamedTensors& tensors);

void set_trainable(const NamedTensors& tensors, bool trainable);
// Rebuilds weights from named tensors (checkpoint loading).
VisualEncoderWeights visual_from_named(const VisualEncoderConfig& config,
                                       const NamedTensors& tensors,
                                       const std::string& prefix);
TextEncoderWeights text_from_named(const TextEncoderConfig& config,
                                   const NamedTensors& tensors,
                                   const std::string& prefix);

}  // namespace taca
