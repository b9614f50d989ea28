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
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taca/data.hpp"
#include "taca/encoder.hpp"
#include "taca/peft.hpp"

namespace taca {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

// Decoupled weight decay Adam over a fixed list of tensors.
class AdamW {
 public:
  AdamW(NamedTensors params, AdamWConfig config);

  // Throws ContractError if a parameter has no gradient; nothing is updated
  // in that case.
  void step();
  // Drops every parameter gradient.
  void zero_grad();

  std::size_t step_count() const { return steps_; }
  const NamedTensors& params() const { return params_; }
  // Flattened first/second moments, one entry per parameter.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  NamedTensors params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

struct TrainConfig {
  AdamWConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t steps = 1500;
  std::uint64_t seed = 0;
  double lambda = 2.0;
  double temperature = 0.07;
  // Contrastive term in both directions during compatibility training.
  bool symmetric_contrastive = false;

  void validate() const;
};

// Epoch-wise seeded permutations; the last partial batch of an epoch is
// dropped.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0, cursor_ = 0;
  std::vector<std::size_t> order_;
};

struct ClipModel {
  VisualEncoderWeights visual;
  TextEncoderWeights text;
  double temperature = 0.07;
};

struct ClipStepLog {
  std::size_t step = 0;
  double loss = 0.0;
};

// Jointly trains freshly initialized encoders with the symmetric CLIP loss.
// Initialization and batch order derive from config.seed.
ClipModel pretrain_clip(const VisualEncoderConfig& visual, const TextEncoderConfig& text,
                        const Dataset& dataset, const TrainConfig& config,
                        std::vector<ClipStepLog>* log = nullptr);

struct TacaStepLog {
  std::size_t step = 0;
  double total = 0.0;
  double contrastive = 0.0;
  double distill = 0.0;
};

// Trains a fresh attachment on `new_visual` against the frozen old model.
// Old features are computed once without gradient tracking; only the
// attachment is updated. The attachment seed derives from config.seed.
TacaAttachment train_taca(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                          const TacaConfig& taca, const Dataset& dataset,
                          const TrainConfig& config, std::vector<TacaStepLog>* log = nullptr);

// Encodes in batches without gradient tracking.
Tensor encode_images_batched(const VisualEncoderWeights& w, std::span<const Image> images,
                             const BlockHooks* hooks = nullptr, std::size_t batch = 256);
Tensor encode_texts_batched(const TextEncoderWeights& w, std::span<const TokenSequence> texts,
                            std::size_t batch = 512);
Tensor encode_compatible_batched(const VisualEncoderWeights& encoder,
                                 const TacaAttachment& attachment,
                                 std::span<const Image> images, std::size_t batch = 256);

// Named tensors plus a JSON metadata document.
struct Checkpoint {
  std::string metadata;  // JSON text
  NamedTensors tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// ContractError on duplicate names.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
// FormatError on bad magic or content, VersionError on an unknown version,
// TruncatedError when the data ends early.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over tensor names, shapes and values, as 16 hex digits.
std::string tensor_digest(const NamedTensors& tensors);
bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b);

// Metadata "kind" is "clip" or "taca". `extra` (JSON object text) is merged
// into the metadata.
Checkpoint clip_checkpoint(const ClipModel& model, const std::string& extra = "{}");
ClipModel clip_from_checkpoint(const Checkpoint& checkpoint);
Checkpoint taca_checkpoint(const TacaAttachment& attachment, std::size_t old_dim,
                           const std::string& extra = "{}");
// ConfigError when the stored projector does not map `new_visual`'s
// embedding dimension, FormatError when tensors are missing.
TacaAttachment taca_from_checkpoint(const Checkpoint& checkpoint,
                                    const VisualEncoderWeights& new_visual);
std::size_t taca_old_dim(const Checkpoint& checkpoint);

}  // namespace taca
