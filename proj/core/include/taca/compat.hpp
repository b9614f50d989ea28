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
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "taca/data.hpp"
#include "taca/peft.hpp"
#include "taca/tensor.hpp"
#include "taca/trainer.hpp"

// Downstream proxies and the hot-plug verdict.
namespace taca {

// Fraction of queries whose ground-truth gallery row ranks within the top k
// by dot product; ties go to the lower gallery index.
double recall_at_k(const Tensor& queries, const Tensor& gallery,
                   std::span<const std::size_t> truth, std::size_t k);

struct HeadConfig {
  std::size_t steps = 300;
  double learning_rate = 0.05;
  double weight_decay = 0.0;

  void validate() const;
};

// Linear classifier over frozen features.
struct DownstreamHead {
  Tensor weight;  // [d x classes]
  Tensor bias;    // [classes]
  std::string trained_on;
};

// Full-batch softmax cross-entropy with AdamW. ConfigError when fewer than
// two classes occur or there are fewer rows than classes.
DownstreamHead train_head(const Tensor& features, std::span<const std::size_t> labels,
                          std::size_t num_classes, std::uint64_t seed,
                          const HeadConfig& config = {}, std::string trained_on = "old");
// Argmax accuracy; ties go to the lower class index.
double eval_top1(const DownstreamHead& head, const Tensor& features,
                 std::span<const std::size_t> labels);

enum class Task { kRetrieval, kClassification };
Task parse_task(std::string_view name);
std::string_view task_name(Task task);

struct EvalConfig {
  Task task = Task::kRetrieval;
  std::size_t k = 1;
  // Head-training seeds; classification metrics average over them.
  std::vector<std::uint64_t> seeds{0};
  HeadConfig head;

  void validate() const;
};

// Everything the proxies need, computed once per evaluation dataset.
struct EvalFeatures {
  Tensor old_visual;                      // [N x d_o]
  Tensor candidate_visual;                // [N x d_o], the hot-plugged encoder
  std::optional<Tensor> new_visual;       // [N x d_n], cold-plug upper bound
  Tensor old_gallery;                     // [G x d_o], old text features
  std::optional<Tensor> new_gallery;      // [G x d_n]
  std::vector<std::size_t> gallery_truth;  // per image
  std::vector<std::size_t> labels;         // per image
};

// One caption per latent present in the dataset (first occurrence, in latent
// order) and, per sample, the gallery index of its latent.
struct Gallery {
  std::vector<TokenSequence> captions;
  std::vector<std::size_t> truth;
};
Gallery build_gallery(const Dataset& dataset);

// ConfigError when the attachment's projector does not map into the old
// embedding space.
EvalFeatures extract_features(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                              const TacaAttachment& attachment, const ClipModel* cold_model,
                              const Dataset& dataset);

struct CompatReport {
  std::string task;
  std::string metric;
  double m_old_old = 0.0;
  double m_old_new = 0.0;
  std::optional<double> m_new_new;
  bool left_ok = false;
  bool right_ok = false;
  std::vector<std::uint64_t> seeds;
  double chance = 0.0;

  // left: m_old_old < m_old_new; right: m_old_new < m_new_new.
  void recompute_flags();
  std::string to_json() const;
};

// Classification heads train on the first half of the samples and are scored
// on the second half. The old head is shared between the old and candidate
// encoders and is checked to be unchanged by the evaluation.
CompatReport report_from_features(const EvalFeatures& features, const EvalConfig& config);

CompatReport hot_plug_report(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                             const TacaAttachment& attachment, const ClipModel* cold_model,
                             const Dataset& dataset, const EvalConfig& config);

// R@k of the new encoder behind an untrained attachment: the control with no
// compatibility training.
double raw_swap_baseline(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                         const TacaConfig& taca, const Dataset& dataset, std::uint64_t seed,
                         std::size_t k = 1);

double median(std::vector<double> values);

}  // namespace taca
