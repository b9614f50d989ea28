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

#include "taca/encoder.hpp"

#include <cmath>
#include <map>
#include <numeric>

#include "taca/errors.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"

namespace taca {

namespace {

constexpr double kEmbedStd = 0.02;
constexpr std::size_t kFfnExpansion = 4;

const BlockHooks& default_hooks() {
  static const BlockHooks hooks;
  return hooks;
}

std::string size_str(std::size_t v) { return std::to_string(v); }

BlockWeights init_block(std::size_t width, Rng& rng) {
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(width));
  const double fc2_std = 1.0 / std::sqrt(static_cast<double>(kFfnExpansion * width));
  const std::size_t hidden = kFfnExpansion * width;
  BlockWeights b;
  b.ln1_gain = Tensor::full({width}, 1.0);
  b.ln1_bias = Tensor::zeros({width});
  b.wq = rng.normal_tensor({width, width}, attn_std);
  b.bq = Tensor::zeros({width});
  b.wk = rng.normal_tensor({width, width}, attn_std);
  b.bk = Tensor::zeros({width});
  b.wv = rng.normal_tensor({width, width}, attn_std);
  b.bv = Tensor::zeros({width});
  b.wo = rng.normal_tensor({width, width}, attn_std);
  b.bo = Tensor::zeros({width});
  b.ln2_gain = Tensor::full({width}, 1.0);
  b.ln2_bias = Tensor::zeros({width});
  b.fc1_w = rng.normal_tensor({hidden, width}, attn_std);
  b.fc1_b = Tensor::zeros({hidden});
  b.fc2_w = rng.normal_tensor({width, hidden}, fc2_std);
  b.fc2_b = Tensor::zeros({width});
  return b;
}

void append_block(NamedTensors& out, const std::string& prefix, const BlockWeights& b) {
  out.emplace_back(prefix + "ln1.gain", b.ln1_gain);
  out.emplace_back(prefix + "ln1.bias", b.ln1_bias);
  out.emplace_back(prefix + "attn.wq", b.wq);
  out.emplace_back(prefix + "attn.bq", b.bq);
  out.emplace_back(prefix + "attn.wk", b.wk);
  out.emplace_back(prefix + "attn.bk", b.bk);
  out.emplace_back(prefix + "attn.wv", b.wv);
  out.emplace_back(prefix + "attn.bv", b.bv);
  out.emplace_back(prefix + "attn.wo", b.wo);
  out.emplace_back(prefix + "attn.bo", b.bo);
  out.emplace_back(prefix + "ln2.gain", b.ln2_gain);
  out.emplace_back(prefix + "ln2.bias", b.ln2_bias);
  out.emplace_back(prefix + "ffn.fc1_w", b.fc1_w);
  out.emplace_back(prefix + "ffn.fc1_b", b.fc1_b);
  out.emplace_back(prefix + "ffn.fc2_w", b.fc2_w);
  out.emplace_back(prefix + "ffn.fc2_b", b.fc2_b);
}

std::size_t block_parameter_count(std::size_t k) {
  // Two layer norms, four attention projections with biases, and the
  // 4x-expanded feed-forward pair with biases.
  return 12 * k * k + 13 * k;
}

class NamedLookup {
 public:
  NamedLookup(const NamedTensors& tensors, std::string prefix)
      : prefix_(std::move(prefix)) {
    for (const auto& [name, t] : tensors) index_.emplace(name, t);
  }

  Tensor get(const std::string& name, const Shape& shape) const {
    auto it = index_.find(prefix_ + name);
    if (it == index_.end()) {
      throw FormatError("missing tensor '" + prefix_ + name + "'");
    }
    if (it->second.shape() != shape) {
      throw FormatError("tensor '" + prefix_ + name + "' has shape " +
                        shape_string(it->second.shape()) + ", expected " +
                        shape_string(shape));
    }
    return it->second;
  }

  BlockWeights block(std::size_t i, std::size_t k) const {
    const std::string p = "blocks." + size_str(i) + ".";
    const std::size_t h = kFfnExpansion * k;
    BlockWeights b;
    b.ln1_gain = get(p + "ln1.gain", {k});
    b.ln1_bias = get(p + "ln1.bias", {k});
    b.wq = get(p + "attn.wq", {k, k});
    b.bq = get(p + "attn.bq", {k});
    b.wk = get(p + "attn.wk", {k, k});
    b.bk = get(p + "attn.bk", {k});
    b.wv = get(p + "attn.wv", {k, k});
    b.bv = get(p + "attn.bv", {k});
    b.wo = get(p + "attn.wo", {k, k});
    b.bo = get(p + "attn.bo", {k});
    b.ln2_gain = get(p + "ln2.gain", {k});
    b.ln2_bias = get(p + "ln2.bias", {k});
    b.fc1_w = get(p + "ffn.fc1_w", {h, k});
    b.fc1_b = get(p + "ffn.fc1_b", {h});
    b.fc2_w = get(p + "ffn.fc2_w", {k, h});
    b.fc2_b = get(p + "ffn.fc2_b", {k});
    return b;
  }

 private:
  std::string prefix_;
  std::map<std::string, Tensor> index_;
};

}  // namespace

void ImageSpec::validate() const {
  if (height == 0 || width == 0 || channels == 0 || patch == 0) {
    throw SpecError("image spec fields must be positive");
  }
  if (height % patch != 0 || width % patch != 0) {
    throw SpecError("patch size " + size_str(patch) + " does not divide " +
                    size_str(height) + "x" + size_str(width));
  }
}

void VisualEncoderConfig::validate() const {
  image.validate();
  if (layers < 1) throw ConfigError("visual encoder needs at least one layer");
  if (width == 0 || embed_dim == 0) throw ConfigError("visual encoder dims must be positive");
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("visual heads " + size_str(heads) + " must divide width " +
                      size_str(width));
  }
}

void TextEncoderConfig::validate() const {
  if (layers < 1) throw ConfigError("text encoder needs at least one layer");
  if (width == 0 || embed_dim == 0) throw ConfigError("text encoder dims must be positive");
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("text heads " + size_str(heads) + " must divide width " +
                      size_str(width));
  }
  if (cls_id == sep_id) throw ConfigError("cls_id and sep_id must differ");
  if (cls_id >= vocab_size || sep_id >= vocab_size) {
    throw ConfigError("cls_id/sep_id must be below vocab_size " + size_str(vocab_size));
  }
  if (max_len < 2) throw ConfigError("max_len must leave room for [CLS] and [SEP]");
}

Tensor BlockHooks::after_attention(std::size_t, const Tensor& out) const { return out; }

Tensor BlockHooks::after_ffn(std::size_t, const Tensor& out) const { return out; }

Tensor BlockHooks::project_query(std::size_t, const Tensor& x, const BlockWeights& w) const {
  return linear(x, w.wq, w.bq);
}

Tensor BlockHooks::project_value(std::size_t, const Tensor& x, const BlockWeights& w) const {
  return linear(x, w.wv, w.bv);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul_nt(x, w), b);
}

Tensor transformer_block(const BlockWeights& w, const Tensor& x, std::size_t groups,
                         std::size_t heads, std::size_t layer, const BlockHooks* hooks) {
  const BlockHooks& h = hooks ? *hooks : default_hooks();
  const Tensor normed = layer_norm(x, w.ln1_gain, w.ln1_bias);
  const Tensor q = h.project_query(layer, normed, w);
  const Tensor k = linear(normed, w.wk, w.bk);
  const Tensor v = h.project_value(layer, normed, w);
  Tensor attn = linear(attention(q, k, v, groups, heads), w.wo, w.bo);
  attn = h.after_attention(layer, attn);
  const Tensor mid = add(x, attn);

  const Tensor normed2 = layer_norm(mid, w.ln2_gain, w.ln2_bias);
  Tensor ffn = linear(gelu(linear(normed2, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
  ffn = h.after_ffn(layer, ffn);
  return add(mid, ffn);
}

Tensor run_blocks(std::span<const BlockWeights> blocks, const Tensor& x,
                  std::size_t groups, std::size_t heads, std::size_t first,
                  std::size_t last, const BlockHooks* hooks, std::vector<Tensor>* trace) {
  Tensor h = x;
  for (std::size_t i = first; i < last; ++i) {
    h = transformer_block(blocks[i], h, groups, heads, i, hooks);
    if (trace) trace->push_back(h);
  }
  return h;
}

Tensor patchify(const Image& image, const ImageSpec& spec) {
  return patchify_batch(std::span<const Image>(&image, 1), spec);
}

Tensor patchify_batch(std::span<const Image> images, const ImageSpec& spec) {
  spec.validate();
  if (images.empty()) throw SpecError("no images to patchify");
  const std::size_t p = spec.patch, c = spec.channels;
  const std::size_t grid_w = spec.width / p;
  const std::size_t n_patches = spec.patch_count();
  const std::size_t dim = spec.patch_dim();
  std::vector<double> out(images.size() * n_patches * dim);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = images[b];
    if (img.height != spec.height || img.width != spec.width || img.channels != spec.channels ||
        img.pixels.size() != spec.pixel_count()) {
      throw SpecError("image " + size_str(img.height) + "x" + size_str(img.width) + "x" +
                      size_str(img.channels) + " does not match spec " +
                      size_str(spec.height) + "x" + size_str(spec.width) + "x" +
                      size_str(spec.channels));
    }
    for (std::size_t patch = 0; patch < n_patches; ++patch) {
      const std::size_t py = patch / grid_w, px = patch % grid_w;
      double* dst = out.data() + (b * n_patches + patch) * dim;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          const std::size_t src = ((py * p + y) * spec.width + (px * p + x)) * c;
          for (std::size_t ch = 0; ch < c; ++ch) *dst++ = img.pixels[src + ch];
        }
      }
    }
  }
  return Tensor::from_values({images.size() * n_patches, dim}, std::move(out));
}

Tensor embed_images(const VisualEncoderWeights& w, std::span<const Image> images) {
  const Tensor patches = patchify_batch(images, w.config.image);
  const Tensor tokens = matmul_nt(patches, w.patch_embed);
  return add_tiled(prepend_rows(tokens, w.cls_token, images.size()), w.pos_embed);
}

Tensor visual_head(const VisualEncoderWeights& w, const Tensor& hidden, std::size_t groups) {
  const std::size_t t = w.config.sequence_length();
  std::vector<std::size_t> cls_rows(groups);
  for (std::size_t g = 0; g < groups; ++g) cls_rows[g] = g * t;
  const Tensor cls = select_rows(hidden, cls_rows);
  const Tensor normed = layer_norm(cls, w.final_ln_gain, w.final_ln_bias);
  return l2_normalize_rows(matmul_nt(normed, w.proj));
}

Tensor encode_images(const VisualEncoderWeights& w, std::span<const Image> images,
                     const BlockHooks* hooks, std::vector<Tensor>* trace) {
  const Tensor x = embed_images(w, images);
  const Tensor h = run_blocks(w.blocks, x, images.size(), w.config.heads, 0,
                              w.blocks.size(), hooks, trace);
  return visual_head(w, h, images.size());
}

Tensor encode_image(const VisualEncoderWeights& w, const Image& image) {
  return reshape(encode_images(w, std::span<const Image>(&image, 1)), {w.config.embed_dim});
}

TokenSequence frame_tokens(const TextEncoderConfig& config, const TokenSequence& tokens) {
  if (tokens.size() + 2 > config.max_len) {
    throw LengthError("caption of " + size_str(tokens.size()) + " tokens exceeds max_len " +
                      size_str(config.max_len) + " after adding [CLS]/[SEP]");
  }
  TokenSequence framed;
  framed.reserve(tokens.size() + 2);
  framed.push_back(config.cls_id);
  for (auto id : tokens) {
    if (id >= config.vocab_size) {
      throw VocabError("token id " + size_str(id) + " outside vocabulary of " +
                       size_str(config.vocab_size));
    }
    framed.push_back(id);
  }
  framed.push_back(config.sep_id);
  return framed;
}

namespace {

// Encodes captions that all share one framed length.
Tensor encode_equal_length(const TextEncoderWeights& w, std::span<const TokenSequence> framed,
                           const BlockHooks* hooks) {
  const std::size_t t = framed.front().size();
  std::vector<std::size_t> ids;
  ids.reserve(framed.size() * t);
  for (const auto& f : framed) ids.insert(ids.end(), f.begin(), f.end());
  std::vector<std::size_t> positions(t);
  std::iota(positions.begin(), positions.end(), 0);
  const Tensor x = add_tiled(select_rows(w.token_embed, ids), select_rows(w.pos_embed, positions));
  const Tensor h = run_blocks(w.blocks, x, framed.size(), w.config.heads, 0, w.blocks.size(),
                              hooks);
  std::vector<std::size_t> sep_rows(framed.size());
  for (std::size_t g = 0; g < framed.size(); ++g) sep_rows[g] = g * t + t - 1;
  const Tensor sep = layer_norm(select_rows(h, sep_rows), w.final_ln_gain, w.final_ln_bias);
  return l2_normalize_rows(matmul_nt(sep, w.proj));
}

}  // namespace

Tensor encode_texts(const TextEncoderWeights& w, std::span<const TokenSequence> texts,
                    const BlockHooks* hooks) {
  if (texts.empty()) throw SpecError("no captions to encode");
  std::vector<TokenSequence> framed;
  framed.reserve(texts.size());
  for (const auto& t : texts) framed.push_back(frame_tokens(w.config, t));

  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < framed.size(); ++i) by_length[framed[i].size()].push_back(i);
  if (by_length.size() == 1) return encode_equal_length(w, framed, hooks);

  std::vector<Tensor> parts;
  std::vector<std::size_t> order;
  for (const auto& [len, members] : by_length) {
    std::vector<TokenSequence> group;
    for (auto i : members) group.push_back(framed[i]);
    parts.push_back(encode_equal_length(w, group, hooks));
    order.insert(order.end(), members.begin(), members.end());
  }
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) inverse[order[pos]] = pos;
  return select_rows(concat_rows(parts), inverse);
}

Tensor encode_text(const TextEncoderWeights& w, const TokenSequence& tokens) {
  return reshape(encode_texts(w, std::span<const TokenSequence>(&tokens, 1)),
                 {w.config.embed_dim});
}

VisualEncoderWeights init_visual_encoder(const VisualEncoderConfig& config,
                                         std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t k = config.width;
  VisualEncoderWeights w;
  w.config = config;
  w.patch_embed = rng.normal_tensor({k, config.image.patch_dim()}, kEmbedStd);
  w.cls_token = rng.normal_tensor({k}, kEmbedStd);
  w.pos_embed = rng.normal_tensor({config.sequence_length(), k}, kEmbedStd);
  for (std::size_t i = 0; i < config.layers; ++i) w.blocks.push_back(init_block(k, rng));
  w.final_ln_gain = Tensor::full({k}, 1.0);
  w.final_ln_bias = Tensor::zeros({k});
  w.proj = rng.normal_tensor({config.embed_dim, k}, kEmbedStd);
  return w;
}

TextEncoderWeights init_text_encoder(const TextEncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t k = config.width;
  TextEncoderWeights w;
  w.config = config;
  w.token_embed = rng.normal_tensor({config.vocab_size, k}, kEmbedStd);
  w.pos_embed = rng.normal_tensor({config.max_len, k}, kEmbedStd);
  for (std::size_t i = 0; i < config.layers; ++i) w.blocks.push_back(init_block(k, rng));
  w.final_ln_gain = Tensor::full({k}, 1.0);
  w.final_ln_bias = Tensor::zeros({k});
  w.proj = rng.normal_tensor({config.embed_dim, k}, kEmbedStd);
  return w;
}

NamedTensors VisualEncoderWeights::named_tensors() const {
  NamedTensors out;
  out.emplace_back("patch_embed", patch_embed);
  out.emplace_back("cls_token", cls_token);
  out.emplace_back("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    append_block(out, "blocks." + size_str(i) + ".", blocks[i]);
  }
  out.emplace_back("ln_final.gain", final_ln_gain);
  out.emplace_back("ln_final.bias", final_ln_bias);
  out.emplace_back("proj", proj);
  return out;
}

NamedTensors TextEncoderWeights::named_tensors() const {
  NamedTensors out;
  out.emplace_back("token_embed", token_embed);
  out.emplace_back("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    append_block(out, "blocks." + size_str(i) + ".", blocks[i]);
  }
  out.emplace_back("ln_final.gain", final_ln_gain);
  out.emplace_back("ln_final.bias", final_ln_bias);
  out.emplace_back("proj", proj);
  return out;
}

std::size_t visual_parameter_count(const VisualEncoderConfig& c) {
  const std::size_t k = c.width;
  return k * c.image.patch_dim() + k + c.sequence_length() * k +
         c.layers * block_parameter_count(k) + 2 * k + c.embed_dim * k;
}

std::size_t text_parameter_count(const TextEncoderConfig& c) {
  const std::size_t k = c.width;
  return c.vocab_size * k + c.max_len * k + c.layers * block_parameter_count(k) + 2 * k +
         c.embed_dim * k;
}

std::size_t enumerate_parameters(const NamedTensors& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

void set_trainable(const NamedTensors& tensors, bool trainable) {
  for (auto [name, t] : tensors) t.set_trainable(trainable);
}

VisualEncoderWeights visual_from_named(const VisualEncoderConfig& config,
                                       const NamedTensors& tensors, const std::string& prefix) {
  config.validate();
  const NamedLookup lookup(tensors, prefix);
  const std::size_t k = config.width;
  VisualEncoderWeights w;
  w.config = config;
  w.patch_embed = lookup.get("patch_embed", {k, config.image.patch_dim()});
  w.cls_token = lookup.get("cls_token", {k});
  w.pos_embed = lookup.get("pos_embed", {config.sequence_length(), k});
  for (std::size_t i = 0; i < config.layers; ++i) w.blocks.push_back(lookup.block(i, k));
  w.final_ln_gain = lookup.get("ln_final.gain", {k});
  w.final_ln_bias = lookup.get("ln_final.bias", {k});
  w.proj = lookup.get("proj", {config.embed_dim, k});
  return w;
}

TextEncoderWeights text_from_named(const TextEncoderConfig& config,
                                   const NamedTensors& tensors, const std::string& prefix) {
  config.validate();
  const NamedLookup lookup(tensors, prefix);
  const std::size_t k = config.width;
  TextEncoderWeights w;
  w.config = config;
  w.token_embed = lookup.get("token_embed", {config.vocab_size, k});
  w.pos_embed = lookup.get("pos_embed", {config.max_len, k});
  for (std::size_t i = 0; i < config.layers; ++i) w.blocks.push_back(lookup.block(i, k));
  w.final_ln_gain = lookup.get("ln_final.gain", {k});
  w.final_ln_bias = lookup.get("ln_final.bias", {k});
  w.proj = lookup.get("proj", {config.embed_dim, k});
  return w;
}

}  // namespace taca
