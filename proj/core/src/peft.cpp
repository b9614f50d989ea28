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

#include "taca/peft.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "taca/errors.hpp"
#include "taca/rng.hpp"

namespace taca {

namespace {

constexpr double kInitStd = 0.02;

std::string str(std::size_t v) { return std::to_string(v); }

Adapter make_adapter(std::size_t width, std::size_t bottleneck, Activation act, Rng& rng) {
  Adapter a;
  a.w_down = rng.normal_tensor({width, bottleneck}, kInitStd, true);
  a.b_down = Tensor::zeros({bottleneck}, true);
  a.w_up = Tensor::zeros({bottleneck, width}, true);
  a.b_up = Tensor::zeros({width}, true);
  a.activation = act;
  return a;
}

LoRAModule make_lora(const Tensor& base, std::size_t rank, double alpha, Rng& rng) {
  LoRAModule m;
  m.base = base;
  m.a = rng.normal_tensor({base.dim(0), rank}, kInitStd, true);
  m.b = Tensor::zeros({rank, base.dim(1)}, true);
  m.rank = rank;
  m.alpha = alpha;
  return m;
}

void freeze(const VisualEncoderWeights& encoder) {
  set_trainable(encoder.named_tensors(), false);
}

void append_adapter(NamedTensors& out, const std::string& prefix, const Adapter& a) {
  out.emplace_back(prefix + "w_down", a.w_down);
  out.emplace_back(prefix + "b_down", a.b_down);
  out.emplace_back(prefix + "w_up", a.w_up);
  out.emplace_back(prefix + "b_up", a.b_up);
}

}  // namespace

PeftVariant parse_variant(std::string_view name) {
  if (name == "adapter") return PeftVariant::kAdapter;
  if (name == "lora") return PeftVariant::kLora;
  throw ConfigError("unknown TaCA variant '" + std::string(name) + "'");
}

std::string_view variant_name(PeftVariant variant) {
  return variant == PeftVariant::kAdapter ? "adapter" : "lora";
}

void TacaConfig::validate(std::size_t layers, std::size_t width) const {
  if (inserted_layers.empty()) throw ConfigError("inserted_layers must not be empty");
  std::set<std::size_t> seen;
  for (auto layer : inserted_layers) {
    if (layer < 1 || layer > layers) {
      throw ConfigError("inserted layer " + str(layer) + " outside 1.." + str(layers));
    }
    if (!seen.insert(layer).second) {
      throw ConfigError("inserted layer " + str(layer) + " listed twice");
    }
  }
  if (projector_hidden == 0) throw ConfigError("projector hidden width must be positive");
  if (variant == PeftVariant::kAdapter) {
    if (bottleneck == 0 || bottleneck >= width) {
      throw ConfigError("bottleneck " + str(bottleneck) + " must lie in [1, " + str(width) + ")");
    }
    if (adapters_per_block != 1 && adapters_per_block != 2) {
      throw ConfigError("adapters_per_block must be 1 or 2");
    }
  } else {
    if (rank == 0 || rank >= width) {
      throw ConfigError("LoRA rank " + str(rank) + " must lie in [1, " + str(width) + ")");
    }
    if (!(lora_alpha > 0.0) || !std::isfinite(lora_alpha)) {
      throw ConfigError("LoRA alpha must be positive");
    }
  }
}

Tensor adapter_forward(const Adapter& adapter, const Tensor& x) {
  const std::size_t k = adapter.w_down.dim(0);
  if (x.cols() != k) {
    throw SpecError("adapter expects last dimension " + str(k) + ", got " +
                    shape_string(x.shape()));
  }
  const Tensor rows = reshape(x, {x.rows(), k});
  const Tensor hidden = activation(add_bias(matmul(rows, adapter.w_down), adapter.b_down),
                                   adapter.activation);
  const Tensor up = add_bias(matmul(hidden, adapter.w_up), adapter.b_up);
  const Tensor out = add(rows, up);
  return x.rank() == 2 ? out : reshape(out, x.shape());
}

Tensor projector_forward(const DimensionProjector& p, const Tensor& v) {
  const std::size_t d_n = p.input_dim();
  if (v.cols() != d_n) {
    throw SpecError("projector expects input dimension " + str(d_n) + ", got " +
                    shape_string(v.shape()));
  }
  const Tensor rows = reshape(v, {v.rows(), d_n});
  const Tensor hidden = activation(add_bias(matmul(rows, p.w1), p.b1), p.activation);
  const Tensor out = l2_normalize_rows(add_bias(matmul(hidden, p.w2), p.b2));
  return v.rank() == 1 ? reshape(out, {p.output_dim()}) : out;
}

Tensor lora_forward(const LoRAModule& m, const Tensor& x) {
  const std::size_t in = m.base.dim(1);
  if (x.cols() != in || m.a.dim(0) != m.base.dim(0) || m.b.dim(1) != in ||
      m.a.dim(1) != m.rank || m.b.dim(0) != m.rank) {
    throw SpecError("LoRA shapes disagree: base " + shape_string(m.base.shape()) + ", a " +
                    shape_string(m.a.shape()) + ", b " + shape_string(m.b.shape()) +
                    ", input " + shape_string(x.shape()));
  }
  const Tensor rows = reshape(x, {x.rows(), in});
  const Tensor frozen = matmul_nt(rows, m.base);
  // Low-rank path as (x . b^T) . a^T; never materializes a . b.
  const Tensor low = matmul_nt(matmul_nt(rows, m.b), m.a);
  return add(frozen, scale(low, m.alpha / static_cast<double>(m.rank)));
}

Tensor TacaAttachment::after_attention(std::size_t layer, const Tensor& out) const {
  auto it = adapters.find(layer);
  if (it == adapters.end() || !it->second.attention) return out;
  return adapter_forward(*it->second.attention, out);
}

Tensor TacaAttachment::after_ffn(std::size_t layer, const Tensor& out) const {
  auto it = adapters.find(layer);
  if (it == adapters.end() || !it->second.ffn) return out;
  return adapter_forward(*it->second.ffn, out);
}

Tensor TacaAttachment::project_query(std::size_t layer, const Tensor& x,
                                     const BlockWeights& w) const {
  auto it = lora.find(layer);
  if (it == lora.end()) return BlockHooks::project_query(layer, x, w);
  return add_bias(lora_forward(it->second.query, x), w.bq);
}

Tensor TacaAttachment::project_value(std::size_t layer, const Tensor& x,
                                     const BlockWeights& w) const {
  auto it = lora.find(layer);
  if (it == lora.end()) return BlockHooks::project_value(layer, x, w);
  return add_bias(lora_forward(it->second.value, x), w.bv);
}

NamedTensors TacaAttachment::named_tensors() const {
  NamedTensors out;
  for (const auto& [layer, block] : adapters) {
    const std::string prefix = "adapter." + str(layer + 1) + ".";
    if (block.attention) append_adapter(out, prefix + "attn.", *block.attention);
    if (block.ffn) append_adapter(out, prefix + "ffn.", *block.ffn);
  }
  for (const auto& [layer, block] : lora) {
    const std::string prefix = "lora." + str(layer + 1) + ".";
    out.emplace_back(prefix + "query.a", block.query.a);
    out.emplace_back(prefix + "query.b", block.query.b);
    out.emplace_back(prefix + "value.a", block.value.a);
    out.emplace_back(prefix + "value.b", block.value.b);
  }
  out.emplace_back("dim_projector.w1", projector.w1);
  out.emplace_back("dim_projector.b1", projector.b1);
  out.emplace_back("dim_projector.w2", projector.w2);
  out.emplace_back("dim_projector.b2", projector.b2);
  return out;
}

std::size_t TacaAttachment::adapter_count() const {
  std::size_t n = 0;
  for (const auto& [layer, block] : adapters) {
    n += block.attention.has_value() + block.ffn.has_value();
  }
  return n;
}

std::size_t TacaAttachment::first_touched_layer() const {
  std::size_t first = config.inserted_layers.empty() ? 0 : config.inserted_layers.front();
  for (auto l : config.inserted_layers) first = std::min(first, l);
  return first == 0 ? 0 : first - 1;
}

TacaAttachment attach_taca(const VisualEncoderWeights& encoder, const TacaConfig& config,
                           std::size_t old_dim, std::uint64_t seed) {
  const auto& ec = encoder.config;
  config.validate(ec.layers, ec.width);
  if (old_dim == 0) throw ConfigError("old embedding dimension must be positive");
  freeze(encoder);

  Rng rng(seed);
  TacaAttachment att;
  att.config = config;
  std::vector<std::size_t> layers = config.inserted_layers;
  std::sort(layers.begin(), layers.end());
  for (auto layer1 : layers) {
    const std::size_t layer = layer1 - 1;
    if (config.variant == PeftVariant::kAdapter) {
      BlockAdapters block;
      if (config.adapters_per_block == 2) {
        block.attention = make_adapter(ec.width, config.bottleneck, config.activation, rng);
      }
      block.ffn = make_adapter(ec.width, config.bottleneck, config.activation, rng);
      att.adapters.emplace(layer, std::move(block));
    } else {
      const auto& bw = encoder.blocks[layer];
      BlockLora block{make_lora(bw.wq, config.rank, config.lora_alpha, rng),
                      make_lora(bw.wv, config.rank, config.lora_alpha, rng)};
      att.lora.emplace(layer, std::move(block));
    }
  }
  // Both projector layers start random: a zero second layer would make every
  // output the normalized bias, which is undefined at a zero bias.
  const std::size_t d_n = ec.embed_dim, d_p = config.projector_hidden;
  att.projector.w1 = rng.normal_tensor({d_n, d_p}, kInitStd, true);
  att.projector.b1 = Tensor::zeros({d_p}, true);
  att.projector.w2 =
      rng.normal_tensor({d_p, old_dim}, 1.0 / std::sqrt(static_cast<double>(d_p)), true);
  att.projector.b2 = Tensor::zeros({old_dim}, true);
  att.projector.activation = config.activation;
  return att;
}

TacaAttachment attachment_from_named(const VisualEncoderWeights& encoder,
                                     const TacaConfig& config, std::size_t old_dim,
                                     const NamedTensors& tensors) {
  // Build the structure with a throwaway seed, then swap in stored values.
  TacaAttachment att = attach_taca(encoder, config, old_dim, 0);
  std::map<std::string, Tensor> stored;
  for (const auto& [name, t] : tensors) stored.emplace(name, t);
  NamedTensors expected = att.named_tensors();
  if (stored.size() != expected.size()) {
    throw FormatError("attachment checkpoint holds " + str(stored.size()) +
                      " tensors, config implies " + str(expected.size()));
  }
  for (auto& [name, t] : expected) {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError("attachment checkpoint lacks '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    std::copy(it->second.values().begin(), it->second.values().end(),
              t.mutable_values().begin());
  }
  return att;
}

Tensor encode_compatible(const VisualEncoderWeights& encoder, const TacaAttachment& attachment,
                         std::span<const Image> images) {
  return encode_compatible_from(encoder, attachment, embed_images(encoder, images),
                                images.size(), 0);
}

Tensor encode_compatible_from(const VisualEncoderWeights& encoder,
                              const TacaAttachment& attachment, const Tensor& hidden,
                              std::size_t groups, std::size_t first) {
  const Tensor h = run_blocks(encoder.blocks, hidden, groups, encoder.config.heads, first,
                              encoder.blocks.size(), &attachment);
  return projector_forward(attachment.projector, visual_head(encoder, h, groups));
}

ParamCount count_trainable(const TacaConfig& config, const VisualEncoderConfig& encoder,
                           std::size_t old_dim) {
  config.validate(encoder.layers, encoder.width);
  const std::size_t k = encoder.width;
  const std::size_t d_n = encoder.embed_dim, d_p = config.projector_hidden, d_o = old_dim;
  const std::size_t layers = config.inserted_layers.size();
  ParamCount c;
  const std::size_t projector_weights = d_n * d_p + d_p * d_o;
  const std::size_t projector_biases = d_p + d_o;
  if (config.variant == PeftVariant::kAdapter) {
    const std::size_t bn = config.bottleneck;
    c.formula = config.adapters_per_block * (2 * layers * k * bn) + projector_weights;
    c.exact = c.formula + config.adapters_per_block * layers * (bn + k) + projector_biases;
  } else {
    // Query and value modules per layer, each r * (m + n) with m = n = k.
    c.formula = layers * 2 * config.rank * 2 * k + projector_weights;
    c.exact = c.formula + projector_biases;
    c.rank_based = true;
  }
  return c;
}

}  // namespace taca
