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

#include "taca/tensor.hpp"

namespace taca {

// Rows fed to contrastive losses must be unit vectors within this tolerance.
inline constexpr double kUnitRowTolerance = 1e-6;

struct ContrastiveConfig {
  double temperature = 0.07;

  void validate() const;
};

struct TacaLossConfig {
  // Weight of the distillation term.
  double lambda = 2.0;
  ContrastiveConfig contrastive;
  // Adds the old-text -> new-image direction to the contrastive term.
  bool symmetric = false;

  void validate() const;
};

// Mean InfoNCE over the batch: row i of `query` is positive with row i of
// `keys`, every other key row is a negative.
Tensor nce(const Tensor& query, const Tensor& keys, double temperature);

// Average of image->text and text->image NCE.
Tensor clip_symmetric_loss(const Tensor& image_feats, const Tensor& text_feats,
                           double temperature);

// Mean squared error over batch and feature dimensions.
Tensor distill_loss(const Tensor& new_feats, const Tensor& old_feats);

// New visual features as queries against old text features as keys.
Tensor cross_model_contrastive(const Tensor& new_image_feats, const Tensor& old_text_feats,
                               double temperature, bool symmetric = false);

struct TacaLoss {
  Tensor total;
  Tensor contrastive;
  Tensor distill;
};

// contrastive + lambda * distill.
TacaLoss taca_total(const Tensor& new_image_feats, const Tensor& old_text_feats,
                    const Tensor& old_image_feats, const TacaLossConfig& config);

}  // namespace taca
