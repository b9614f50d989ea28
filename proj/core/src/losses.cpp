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

#include "taca/losses.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "taca/errors.hpp"
#include "taca/ops.hpp"

namespace taca {

namespace {

void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw ContractError(std::string(what) + ": feature shapes " + shape_string(a.shape()) +
                        " and " + shape_string(b.shape()) + " must match as [B x d]");
  }
}

void require_unit_rows(const Tensor& t, const char* what) {
  const auto v = t.values();
  const std::size_t cols = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += v[r * cols + c] * v[r * cols + c];
    const double dev = std::abs(std::sqrt(sq) - 1.0);
    if (!(dev <= kUnitRowTolerance)) {
      throw ContractError(std::string(what) + ": row " + std::to_string(r) +
                          " has norm deviating from 1 by " + std::to_string(dev));
    }
  }
}

void require_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw ParameterError("temperature must be positive and finite, got " + std::to_string(t));
  }
}

}  // namespace

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive and finite");
  }
}

void TacaLossConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("lambda must be finite and non-negative");
  }
  contrastive.validate();
}

Tensor nce(const Tensor& query, const Tensor& keys, double temperature) {
  require_pair(query, keys, "nce");
  require_temperature(temperature);
  require_unit_rows(query, "nce query");
  require_unit_rows(keys, "nce keys");
  std::vector<std::size_t> targets(query.rows());
  std::iota(targets.begin(), targets.end(), std::size_t{0});
  return cross_entropy_rows(scale(matmul_nt(query, keys), 1.0 / temperature), targets);
}

Tensor clip_symmetric_loss(const Tensor& image_feats, const Tensor& text_feats,
                           double temperature) {
  return scale(add(nce(image_feats, text_feats, temperature),
                   nce(text_feats, image_feats, temperature)),
               0.5);
}

Tensor distill_loss(const Tensor& new_feats, const Tensor& old_feats) {
  require_pair(new_feats, old_feats, "distill_loss");
  const Tensor diff = sub(new_feats, old_feats);
  return mean(mul(diff, diff));
}

Tensor cross_model_contrastive(const Tensor& new_image_feats, const Tensor& old_text_feats,
                               double temperature, bool symmetric) {
  if (symmetric) return clip_symmetric_loss(new_image_feats, old_text_feats, temperature);
  return nce(new_image_feats, old_text_feats, temperature);
}

TacaLoss taca_total(const Tensor& new_image_feats, const Tensor& old_text_feats,
                    const Tensor& old_image_feats, const TacaLossConfig& config) {
  config.validate();
  TacaLoss out;
  out.contrastive = cross_model_contrastive(new_image_feats, old_text_feats,
                                            config.contrastive.temperature, config.symmetric);
  out.distill = distill_loss(new_image_feats, old_image_feats);
  out.total = add(out.contrastive, scale(out.distill, config.lambda));
  return out;
}

}  // namespace taca
