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


#include "taca/compat.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"
#include "taca/errors.hpp"
#include "taca/ops.hpp"
#include "taca/rng.hpp"

namespace taca {

namespace {

std::string str(std::size_t v) { return std::to_string(v); }

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

std::string head_digest(const DownstreamHead& head) {
  return tensor_digest({{"weight", head.weight}, {"bias", head.bias}});
}

}  // namespace

double recall_at_k(const Tensor& queries, const Tensor& gallery,
                   std::span<const std::size_t> truth, std::size_t k) {
  const std::size_t q = queries.rows(), g = gallery.rows();
  if (k < 1 || k > g) {
    throw ParameterError("k = " + str(k) + " outside [1, " + str(g) + "]");
  }
  if (truth.size() != q || queries.cols() != gallery.cols()) {
    throw DimensionError("recall_at_k: " + shape_string(queries.shape()) + " queries, " +
                         shape_string(gallery.shape()) + " gallery, " + str(truth.size()) +
                         " truths");
  }
  if (q == 0) throw ContractError("recall_at_k needs at least one query");
  NoGradScope no_grad;
  const Tensor sims = matmul_nt(queries, gallery);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < q; ++i) {
    if (truth[i] >= g) throw ParameterError("ground truth index outside the gallery");
    const double target = sims.at(i, truth[i]);
    // Rank of the truth: items scoring higher, plus equal scorers with a lower index.
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < g; ++j) {
      const double s = sims.at(i, j);
      if (s > target || (s == target && j < truth[i])) ++ahead;
    }
    hits += ahead < k;
  }
  return static_cast<double>(hits) / static_cast<double>(q);
}

void HeadConfig::validate() const {
  if (steps < 1) throw ConfigError("head steps must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("head learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("head weight decay must be non-negative");
}

DownstreamHead train_head(const Tensor& features, std::span<const std::size_t> labels,
                          std::size_t num_classes, std::uint64_t seed, const HeadConfig& config,
                          std::string trained_on) {
  config.validate();
  const std::size_t n = features.rows(), d = features.cols();
  if (labels.size() != n) {
    throw DimensionError("train_head: " + str(labels.size()) + " labels for " + str(n) +
                         " rows");
  }
  if (n < num_classes) {
    throw ConfigError("train_head needs at least as many rows (" + str(n) + ") as classes (" +
                      str(num_classes) + ")");
  }
  std::vector<bool> present(num_classes, false);
  for (auto l : labels) {
    if (l >= num_classes) throw ConfigError("label " + str(l) + " outside the class range");
    present[l] = true;
  }
  if (std::count(present.begin(), present.end(), true) < 2) {
    throw ConfigError("train_head needs at least two distinct classes");
  }
  Rng rng(seed);
  DownstreamHead head{rng.normal_tensor({d, num_classes}, 0.01, true),
                      Tensor::zeros({num_classes}, true), std::move(trained_on)};
  const Tensor x = features.detach();
  AdamWConfig opt_config;
  opt_config.learning_rate = config.learning_rate;
  opt_config.weight_decay = config.weight_decay;
  AdamW opt({{"weight", head.weight}, {"bias", head.bias}}, opt_config);
  for (std::size_t step = 0; step < config.steps; ++step) {
    TapeScope scope;
    backward(cross_entropy_rows(add_bias(matmul(x, head.weight), head.bias), labels));
    opt.step();
    opt.zero_grad();
  }
  head.weight.set_trainable(false);
  head.bias.set_trainable(false);
  return head;
}

double eval_top1(const DownstreamHead& head, const Tensor& features,
                 std::span<const std::size_t> labels) {
  if (!features.defined() || features.rows() == 0 || labels.empty()) {
    throw ContractError("eval_top1 needs a non-empty feature set");
  }
  if (labels.size() != features.rows() || features.cols() != head.weight.dim(0)) {
    throw DimensionError("eval_top1: features " + shape_string(features.shape()) +
                         " do not fit head " + shape_string(head.weight.shape()) + " and " +
                         str(labels.size()) + " labels");
  }
  NoGradScope no_grad;
  const Tensor logits = add_bias(matmul(features, head.weight), head.bias);
  const std::size_t c = logits.cols();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    correct += best == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Task parse_task(std::string_view name) {
  if (name == "retrieval") return Task::kRetrieval;
  if (name == "classification") return Task::kClassification;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::string_view task_name(Task task) {
  return task == Task::kRetrieval ? "retrieval" : "classification";
}

void EvalConfig::validate() const {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (seeds.empty()) throw ConfigError("at least one evaluation seed is required");
  head.validate();
}

Gallery build_gallery(const Dataset& dataset) {
  std::map<std::size_t, TokenSequence> first;
  for (const auto& s : dataset.samples) first.try_emplace(s.latent.index(), s.caption);
  Gallery g;
  std::map<std::size_t, std::size_t> slot;
  for (const auto& [latent, caption] : first) {
    slot[latent] = g.captions.size();
    g.captions.push_back(caption);
  }
  for (const auto& s : dataset.samples) g.truth.push_back(slot.at(s.latent.index()));
  return g;
}

EvalFeatures extract_features(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                              const TacaAttachment& attachment, const ClipModel* cold_model,
                              const Dataset& dataset) {
  const std::size_t old_dim = old_model.visual.config.embed_dim;
  if (attachment.projector.output_dim() != old_dim) {
    throw ConfigError("attachment projects to dimension " +
                      str(attachment.projector.output_dim()) + " but the old model uses " +
                      str(old_dim));
  }
  if (attachment.projector.input_dim() != new_visual.config.embed_dim) {
    throw ConfigError("attachment expects new dimension " + str(attachment.projector.input_dim()) +
                      " but the new encoder emits " + str(new_visual.config.embed_dim));
  }
  const auto images = dataset_images(dataset);
  const Gallery gallery = build_gallery(dataset);
  EvalFeatures f;
  f.old_visual = encode_images_batched(old_model.visual, images);
  f.candidate_visual = encode_compatible_batched(new_visual, attachment, images);
  f.old_gallery = encode_texts_batched(old_model.text, gallery.captions);
  if (cold_model) {
    f.new_visual = encode_images_batched(cold_model->visual, images);
    f.new_gallery = encode_texts_batched(cold_model->text, gallery.captions);
  }
  f.gallery_truth = gallery.truth;
  f.labels = dataset_labels(dataset);
  return f;
}

void CompatReport::recompute_flags() {
  left_ok = m_old_old < m_old_new;
  right_ok = m_new_new.has_value() && m_old_new < *m_new_new;
}

std::string CompatReport::to_json() const {
  nlohmann::json j = {{"task", task},
                      {"metric", metric},
                      {"m_old_old", m_old_old},
                      {"m_old_new", m_old_new},
                      {"m_new_new", m_new_new ? nlohmann::json(*m_new_new) : nlohmann::json()},
                      {"left_ok", left_ok},
                      {"right_ok", right_ok},
                      {"seeds", seeds},
                      {"chance", chance}};
  return j.dump(2);
}

CompatReport report_from_features(const EvalFeatures& f, const EvalConfig& config) {
  config.validate();
  CompatReport r;
  r.task = std::string(task_name(config.task));
  r.seeds = config.seeds;
  if (config.task == Task::kRetrieval) {
    r.metric = "R@" + str(config.k);
    const std::size_t g = f.old_gallery.rows();
    r.m_old_old = recall_at_k(f.old_visual, f.old_gallery, f.gallery_truth, config.k);
    r.m_old_new = recall_at_k(f.candidate_visual, f.old_gallery, f.gallery_truth, config.k);
    if (f.new_visual && f.new_gallery) {
      r.m_new_new = recall_at_k(*f.new_visual, *f.new_gallery, f.gallery_truth, config.k);
    }
    r.chance = static_cast<double>(config.k) / static_cast<double>(g);
  } else {
    r.metric = "top1";
    const std::size_t n = f.labels.size();
    if (n < 2) throw ConfigError("classification needs at least two samples");
    const auto train_rows = iota_range(0, n / 2);
    const auto test_rows = iota_range(n / 2, n);
    const std::vector<std::size_t> train_labels(f.labels.begin(), f.labels.begin() + n / 2);
    const std::vector<std::size_t> test_labels(f.labels.begin() + n / 2, f.labels.end());
    NoGradScope no_grad;
    double oo = 0.0, on = 0.0, nn = 0.0;
    for (auto seed : config.seeds) {
      const DownstreamHead old_head =
          train_head(select_rows(f.old_visual, train_rows), train_labels, kLatentCount, seed,
                     config.head, "old");
      const std::string before = head_digest(old_head);
      oo += eval_top1(old_head, select_rows(f.old_visual, test_rows), test_labels);
      on += eval_top1(old_head, select_rows(f.candidate_visual, test_rows), test_labels);
      if (head_digest(old_head) != before) {
        throw ContractError("old task head changed during hot-plug evaluation");
      }
      if (f.new_visual) {
        const DownstreamHead new_head =
            train_head(select_rows(*f.new_visual, train_rows), train_labels, kLatentCount, seed,
                       config.head, "new");
        nn += eval_top1(new_head, select_rows(*f.new_visual, test_rows), test_labels);
      }
    }
    const double count = static_cast<double>(config.seeds.size());
    r.m_old_old = oo / count;
    r.m_old_new = on / count;
    if (f.new_visual) r.m_new_new = nn / count;
    r.chance = 1.0 / static_cast<double>(kLatentCount);
  }
  r.recompute_flags();
  return r;
}

CompatReport hot_plug_report(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                             const TacaAttachment& attachment, const ClipModel* cold_model,
                             const Dataset& dataset, const EvalConfig& config) {
  return report_from_features(
      extract_features(old_model, new_visual, attachment, cold_model, dataset), config);
}

double raw_swap_baseline(const ClipModel& old_model, const VisualEncoderWeights& new_visual,
                         const TacaConfig& taca, const Dataset& dataset, std::uint64_t seed,
                         std::size_t k) {
  const TacaAttachment untrained =
      attach_taca(new_visual, taca, old_model.visual.config.embed_dim, seed);
  const auto images = dataset_images(dataset);
  const Gallery gallery = build_gallery(dataset);
  const Tensor queries = encode_compatible_batched(new_visual, untrained, images);
  const Tensor keys = encode_texts_batched(old_model.text, gallery.captions);
  return recall_at_k(queries, keys, gallery.truth, k);
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace taca
