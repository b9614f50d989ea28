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
#include <string>
#include <string_view>

#include "taca/compat.hpp"
#include "taca/encoder.hpp"
#include "taca/peft.hpp"
#include "taca/trainer.hpp"

namespace taca::cli {

enum class Role { kOld, kNew };
Role parse_role(std::string_view name);
std::string_view role_name(Role role);

// One JSON document with the sections below. Every key is optional and
// falls back to the default shown; unknown keys are a ConfigError.
//
//   image_spec   height 16, width 16, channels 1, patch 4
//   old_encoder  layers 2, width 32, heads 4, embed_dim 16, pretrain_steps 80
//   new_encoder  layers 4, width 64, heads 4, embed_dim 32, pretrain_steps 600
//   text_encoder layers 2, width 32, heads 4, vocab_size 32, max_len 12
//                (embed_dim follows the paired visual encoder)
//   taca         variant "adapter", bottleneck 16, rank 4, lora_alpha 4,
//                inserted_layers [1,2,3,4], adapters_per_block 1,
//                projector_hidden 64, activation "relu"
//   loss         lambda 2, temperature 0.07, symmetric false
//   train        learning_rate 1e-3, batch_size 32, steps 1500, seed 0,
//                beta1 0.9, beta2 0.999, eps 1e-8, weight_decay 0.01
//   data         n 2048, seed 0
//   eval         task "retrieval", k 1, seeds [0],
//                head {steps 300, learning_rate 0.05, weight_decay 0}
struct RunConfig {
  ImageSpec image_spec;
  VisualEncoderConfig old_encoder;
  std::size_t old_pretrain_steps = 80;
  VisualEncoderConfig new_encoder;
  std::size_t new_pretrain_steps = 600;
  TextEncoderConfig text_encoder;
  TacaConfig taca;
  double lambda = 2.0;
  double temperature = 0.07;
  bool symmetric = false;
  AdamWConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t steps = 1500;
  std::uint64_t seed = 0;
  std::size_t data_n = 2048;
  std::uint64_t data_seed = 0;
  EvalConfig eval;

  RunConfig();

  // Fully resolved encoder configs for a role, image spec applied.
  VisualEncoderConfig visual(Role role) const;
  TextEncoderConfig text(Role role) const;
  // Pretraining for a role: its own step count and a role-derived seed.
  TrainConfig pretrain(Role role) const;
  // Compatibility training.
  TrainConfig taca_training() const;

  // ConfigError on any invalid section.
  void validate() const;
};

// Canonical JSON: every key present, keys sorted.
std::string to_json(const RunConfig& config);
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
// FNV-1a over the canonical JSON, as 16 hex digits.
std::string config_digest(const RunConfig& config);

}  // namespace taca::cli
