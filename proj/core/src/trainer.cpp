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


#include "taca/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "json.hpp"
#include "taca/binary_io.hpp"
#include "taca/errors.hpp"
#include "taca/losses.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"

namespace taca {

namespace {

using nlohmann::json;

constexpr std::array<std::uint8_t, 4> kMagic{'T', 'A', 'C', 'K'};

std::string str(std::size_t v) { return std::to_string(v); }

template <typename T>
std::vector<T> gather(std::span<const T> items, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

json visual_config_json(const VisualEncoderConfig& c) {
  return {{"image", {{"height", c.image.height}, {"width", c.image.width},
                     {"channels", c.image.channels}, {"patch", c.image.patch}}},
          {"layers", c.layers}, {"width", c.width}, {"heads", c.heads},
          {"embed_dim", c.embed_dim}};
}

VisualEncoderConfig visual_config_from(const json& j) {
  VisualEncoderConfig c;
  const auto& im = j.at("image");
  c.image = ImageSpec{im.at("height").get<std::size_t>(), im.at("width").get<std::size_t>(),
                      im.at("channels").get<std::size_t>(), im.at("patch").get<std::size_t>()};
  c.layers = j.at("layers").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  return c;
}

json text_config_json(const TextEncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"layers", c.layers},
          {"width", c.width},           {"heads", c.heads},     {"embed_dim", c.embed_dim},
          {"cls_id", c.cls_id},         {"sep_id", c.sep_id}};
}

TextEncoderConfig text_config_from(const json& j) {
  TextEncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.cls_id = j.at("cls_id").get<std::uint32_t>();
  c.sep_id = j.at("sep_id").get<std::uint32_t>();
  return c;
}

json taca_config_json(const TacaConfig& c) {
  return {{"variant", std::string(variant_name(c.variant))},
          {"bottleneck", c.bottleneck},
          {"rank", c.rank},
          {"lora_alpha", c.lora_alpha},
          {"inserted_layers", c.inserted_layers},
          {"adapters_per_block", c.adapters_per_block},
          {"projector_hidden", c.projector_hidden},
          {"activation", std::string(activation_name(c.activation))}};
}

TacaConfig taca_config_from(const json& j) {
  TacaConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.bottleneck = j.at("bottleneck").get<std::size_t>();
  c.rank = j.at("rank").get<std::size_t>();
  c.lora_alpha = j.at("lora_alpha").get<double>();
  c.inserted_layers = j.at("inserted_layers").get<std::vector<std::size_t>>();
  c.adapters_per_block = j.at("adapters_per_block").get<std::size_t>();
  c.projector_hidden = j.at("projector_hidden").get<std::size_t>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  return c;
}

json parse_metadata(const std::string& text) {
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw FormatError("checkpoint metadata is not a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
}

json merge(json base, const std::string& extra) {
  const json e = json::parse(extra);
  if (!e.is_object()) throw ContractError("checkpoint metadata extras must be a JSON object");
  for (const auto& [key, value] : e.items()) base[key] = value;
  return base;
}

// Wraps metadata lookups so schema problems surface as format errors.
template <typename Fn>
auto read_metadata(Fn fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
}

NamedTensors with_prefix(const NamedTensors& tensors, const std::string& prefix) {
  NamedTensors out;
  for (const auto& [n, t] : tensors) out.emplace_back(prefix + n, t);
  return out;
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("AdamW eps must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight decay must be non-negative");
  }
}

AdamW::AdamW(NamedTensors params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  std::set<std::string> names;
  for (const auto& [name, t] : params_) {
    if (!t.trainable()) throw ContractError("optimizer parameter '" + name + "' is frozen");
    if (!names.insert(name).second) {
      throw ContractError("optimizer parameter '" + name + "' listed twice");
    }
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) throw ContractError("parameter '" + name + "' has no gradient");
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2, lr = config_.learning_rate;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    const auto g = t.grad();
    auto w = t.mutable_values();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] = w[i] * decay - lr * mh / (std::sqrt(vh) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.clear_grad();
}

void TrainConfig::validate() const {
  optimizer.validate();
  if (batch_size < 2) {
    throw ConfigError("batch size must be at least 2 so every batch has negatives");
  }
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive");
  }
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size,
                           std::uint64_t seed)
    : n_(dataset_size), batch_(batch_size), seed_(seed) {
  if (batch_ == 0 || batch_ > n_) {
    throw ConfigError("batch size " + str(batch_) + " must lie in [1, dataset size " + str(n_) +
                      "]");
  }
  reshuffle();
}

void BatchSampler::reshuffle() {
  Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch_)));
  order_ = rng.permutation(n_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  if (cursor_ + batch_ > n_) {
    ++epoch_;
    reshuffle();
  }
  std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
  cursor_ += batch_;
  return out;
}

ClipModel pretrain_clip(const VisualEncoderConfig& visual, const TextEncoderConfig& text,
                        const Dataset& dataset, const TrainConfig& config,
                        std::vector<ClipStepLog>* log) {
  config.validate();
  visual.validate();
  text.validate();
  if (visual.embed_dim != text.embed_dim) {
    throw ConfigError("visual embedding dim " + str(visual.embed_dim) +
                      " differs from text embedding dim " + str(text.embed_dim));
  }
  if (!(visual.image == dataset.spec)) {
    throw ConfigError("encoder image spec does not match the dataset");
  }
  if (dataset.samples.empty()) throw ConfigError("dataset is empty");

  ClipModel model{init_visual_encoder(visual, derive_seed(config.seed, "visual")),
                  init_text_encoder(text, derive_seed(config.seed, "text")),
                  config.temperature};
  NamedTensors params = with_prefix(model.visual.named_tensors(), "visual.");
  for (auto& nt : with_prefix(model.text.named_tensors(), "text.")) params.push_back(nt);
  set_trainable(params, true);
  AdamW opt(params, config.optimizer);
  BatchSampler sampler(dataset.samples.size(), config.batch_size,
                       derive_seed(config.seed, "batches"));
  const auto images = dataset_images(dataset);
  const auto captions = dataset_captions(dataset);

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next();
    const auto batch_images = gather<Image>(images, idx);
    const auto batch_captions = gather<TokenSequence>(captions, idx);
    TapeScope scope;
    const Tensor v = encode_images(model.visual, batch_images);
    const Tensor t = encode_texts(model.text, batch_captions);
    const Tensor loss = clip_symmetric_loss(v, t, config.temperature);
    backward(loss);
    opt.step();
    opt.zero_grad();
    if (log) log->push_back({step, loss.item()});
  }
  set_trainable(params, false);
  return model;
}

Tensor encode_images_batched(const VisualEncoderWeights& w, std::span<const Image> images,
                             const BlockHooks* hooks, std::size_t batch) {
  NoGradScope no_grad;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < images.size(); i += batch) {
    parts.push_back(encode_images(w, images.subspan(i, std::min(batch, images.size() - i)),
                                  hooks));
  }
  return concat_rows(parts);
}

Tensor encode_texts_batched(const TextEncoderWeights& w, std::span<const TokenSequence> texts,
                            std::size_t batch) {
  NoGradScope no_grad;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < texts.size(); i += batch) {
    parts.push_back(encode_texts(w, texts.subspan(i, std::min(batch, texts.size() - i))));
  }
  return concat_rows(parts);
}

Tensor encode_compatible_batched(const VisualEncoderWeights& encoder,
                                 const TacaAttachment& attachment,
                                 std::span<const Image> images, std::size_t batch) {
  NoGradScope no_grad;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < images.size(); i += batch) {
    parts.push_back(encode_compatible(
        encoder, attachment, images.subspan(i, std::min(batch, images.size() - i))));
  }
  return concat_rows(parts);
}

TacaAttachment train_taca(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                          const TacaConfig& taca, const Dataset& dataset,
                          const TrainConfig& config, std::vector<TacaStepLog>* log) {
  config.validate();
  if (!(new_visual.config.image == dataset.spec) ||
      !(old_model.visual.config.image == dataset.spec)) {
    throw ConfigError("encoder image spec does not match the dataset");
  }
  if (dataset.samples.size() < config.batch_size) {
    throw ConfigError("dataset smaller than one batch");
  }
  const std::size_t old_dim = old_model.visual.config.embed_dim;
  TacaAttachment att =
      attach_taca(new_visual, taca, old_dim, derive_seed(config.seed, "attachment"));
  set_trainable(old_model.visual.named_tensors(), false);
  set_trainable(old_model.text.named_tensors(), false);

  const auto images = dataset_images(dataset);
  const auto captions = dataset_captions(dataset);
  // The old model and the blocks before the first adapted one are frozen, so
  // their outputs are computed once for the whole dataset.
  const Tensor old_visual = encode_images_batched(old_model.visual, images);
  const Tensor old_text = encode_texts_batched(old_model.text, captions);
  const std::size_t first = att.first_touched_layer();
  const std::size_t t = new_visual.config.sequence_length();
  std::vector<Tensor> hidden_parts;
  {
    NoGradScope no_grad;
    for (std::size_t i = 0; i < images.size(); i += 256) {
      const auto chunk = std::span<const Image>(images).subspan(i, std::min<std::size_t>(256, images.size() - i));
      hidden_parts.push_back(run_blocks(new_visual.blocks, embed_images(new_visual, chunk),
                                        chunk.size(), new_visual.config.heads, 0, first));
    }
  }
  const Tensor hidden = concat_rows(hidden_parts);

  AdamW opt(att.named_tensors(), config.optimizer);
  BatchSampler sampler(dataset.samples.size(), config.batch_size,
                       derive_seed(config.seed, "batches"));
  TacaLossConfig loss_config;
  loss_config.lambda = config.lambda;
  loss_config.contrastive.temperature = old_model.temperature;
  loss_config.symmetric = config.symmetric_contrastive;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next();
    std::vector<std::size_t> token_rows;
    token_rows.reserve(idx.size() * t);
    for (auto i : idx) {
      for (std::size_t r = 0; r < t; ++r) token_rows.push_back(i * t + r);
    }
    const Tensor batch_hidden = select_rows(hidden, token_rows);
    const Tensor batch_old_visual = select_rows(old_visual, idx);
    const Tensor batch_old_text = select_rows(old_text, idx);
    TapeScope scope;
    const Tensor feats = encode_compatible_from(new_visual, att, batch_hidden, idx.size(), first);
    const TacaLoss loss = taca_total(feats, batch_old_text, batch_old_visual, loss_config);
    backward(loss.total);
    opt.step();
    opt.zero_grad();
    if (log) {
      log->push_back({step, loss.total.item(), loss.contrastive.item(), loss.distill.item()});
    }
  }
  set_trainable(att.named_tensors(), false);
  return att;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  std::set<std::string> names;
  for (const auto& [name, t] : c.tensors) {
    if (!names.insert(name).second) {
      throw ContractError("checkpoint tensor name '" + name + "' is used twice");
    }
  }
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.str(c.metadata);
  w.u64(c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(kMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " is not supported (" + std::to_string(kCheckpointVersion) +
                       " expected)");
  }
  Checkpoint c;
  c.metadata = r.str();
  parse_metadata(c.metadata);
  const auto count = r.u64();
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    if (!names.insert(name).second) {
      throw FormatError("checkpoint tensor name '" + name + "' repeats");
    }
    const auto rank = r.u32();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      if (d > r.remaining()) throw TruncatedError("tensor '" + name + "' exceeds the file");
      numel *= d;
    }
    if (numel > r.remaining() / 8) throw TruncatedError("tensor '" + name + "' exceeds the file");
    std::vector<double> values(numel);
    for (auto& v : values) v = r.f64();
    c.tensors.emplace_back(std::move(name), Tensor::from_values(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

std::string tensor_digest(const NamedTensors& tensors) {
  ByteWriter w;
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(w.bytes())));
  return buf;
}

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
  return serialize_checkpoint(a) == serialize_checkpoint(b);
}

Checkpoint clip_checkpoint(const ClipModel& model, const std::string& extra) {
  json meta = {{"kind", "clip"},
               {"visual", visual_config_json(model.visual.config)},
               {"text", text_config_json(model.text.config)},
               {"temperature", model.temperature}};
  Checkpoint c;
  c.metadata = merge(std::move(meta), extra).dump();
  c.tensors = with_prefix(model.visual.named_tensors(), "visual.");
  for (auto& nt : with_prefix(model.text.named_tensors(), "text.")) c.tensors.push_back(nt);
  return c;
}

ClipModel clip_from_checkpoint(const Checkpoint& checkpoint) {
  const json meta = parse_metadata(checkpoint.metadata);
  return read_metadata([&] {
    if (meta.at("kind") != "clip") throw FormatError("checkpoint is not a CLIP model");
    const auto vc = visual_config_from(meta.at("visual"));
    const auto tc = text_config_from(meta.at("text"));
    try {
      vc.validate();
      tc.validate();
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    ClipModel m{visual_from_named(vc, checkpoint.tensors, "visual."),
                text_from_named(tc, checkpoint.tensors, "text."),
                meta.at("temperature").get<double>()};
    if (!(m.temperature > 0.0)) throw FormatError("checkpoint temperature must be positive");
    return m;
  });
}

Checkpoint taca_checkpoint(const TacaAttachment& attachment, std::size_t old_dim,
                           const std::string& extra) {
  json meta = {{"kind", "taca"},
               {"taca", taca_config_json(attachment.config)},
               {"old_dim", old_dim},
               {"new_dim", attachment.projector.input_dim()}};
  Checkpoint c;
  c.metadata = merge(std::move(meta), extra).dump();
  c.tensors = attachment.named_tensors();
  return c;
}

std::size_t taca_old_dim(const Checkpoint& checkpoint) {
  const json meta = parse_metadata(checkpoint.metadata);
  return read_metadata([&] {
    if (meta.at("kind") != "taca") throw FormatError("checkpoint is not a TaCA attachment");
    return meta.at("old_dim").get<std::size_t>();
  });
}

TacaAttachment taca_from_checkpoint(const Checkpoint& checkpoint,
                                    const VisualEncoderWeights& new_visual) {
  const json meta = parse_metadata(checkpoint.metadata);
  const auto [config, old_dim, new_dim] = read_metadata([&] {
    if (meta.at("kind") != "taca") throw FormatError("checkpoint is not a TaCA attachment");
    return std::tuple{taca_config_from(meta.at("taca")), meta.at("old_dim").get<std::size_t>(),
                      meta.at("new_dim").get<std::size_t>()};
  });
  if (new_dim != new_visual.config.embed_dim) {
    throw ConfigError("attachment expects new embedding dim " + str(new_dim) +
                      ", encoder provides " + str(new_visual.config.embed_dim));
  }
  return attachment_from_named(new_visual, config, old_dim, checkpoint.tensors);
}

}  // namespace taca
