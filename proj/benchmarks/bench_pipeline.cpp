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

#include <benchmark/benchmark.h>

#include <numeric>

#include "taca/compat.hpp"
#include "taca/data.hpp"
#include "taca/losses.hpp"
#include "taca/ops.hpp"
#include "taca/peft.hpp"
#include "taca/rng.hpp"
#include "taca/trainer.hpp"

namespace {

using namespace taca;

VisualEncoderConfig new_encoder_config() {
  VisualEncoderConfig c;
  c.layers = 4;
  c.width = 64;
  c.embed_dim = 32;
  return c;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  NoGradScope no_grad;
  const Tensor a = rng.normal_tensor({n, n}, 1.0);
  const Tensor b = rng.normal_tensor({n, n}, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor a = rng.normal_tensor({n, n}, 1.0, true);
  const Tensor b = rng.normal_tensor({n, n}, 1.0, true);
  for (auto _ : state) {
    TapeScope tape;
    backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(64);

void BM_GenerateDataset(benchmark::State& state) {
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_dataset(static_cast<std::size_t>(state.range(0)), 7));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GenerateDataset)->Arg(256)->Arg(2048);

void BM_EncodeNewVisual(benchmark::State& state) {
  const Dataset d = generate_dataset(static_cast<std::size_t>(state.range(0)), 3);
  const auto images = dataset_images(d);
  const VisualEncoderWeights w = init_visual_encoder(new_encoder_config(), 4);
  NoGradScope no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(encode_images(w, images));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncodeNewVisual)->Arg(32)->Arg(256);

void BM_EncodeCompatible(benchmark::State& state) {
  const Dataset d = generate_dataset(static_cast<std::size_t>(state.range(0)), 3);
  const auto images = dataset_images(d);
  const VisualEncoderWeights w = init_visual_encoder(new_encoder_config(), 4);
  const TacaAttachment att = attach_taca(w, TacaConfig{}, 16, 5);
  NoGradScope no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(encode_compatible(w, att, images));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncodeCompatible)->Arg(32)->Arg(256);

// One forward and backward pass of the compatibility objective on a batch.
void BM_TacaTrainingStep(benchmark::State& state) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const Dataset d = generate_dataset(batch, 3);
  const auto images = dataset_images(d);
  const VisualEncoderWeights w = init_visual_encoder(new_encoder_config(), 4);
  const TacaAttachment att = attach_taca(w, TacaConfig{}, 16, 5);
  Rng rng(6);
  Tensor old_visual, old_text;
  {
    NoGradScope no_grad;
    old_visual = l2_normalize_rows(rng.normal_tensor({batch, 16}, 1.0));
    old_text = l2_normalize_rows(rng.normal_tensor({batch, 16}, 1.0));
  }
  TacaLossConfig loss;
  for (auto _ : state) {
    TapeScope tape;
    const Tensor feats = encode_compatible(w, att, images);
    backward(taca_total(feats, old_text, old_visual, loss).total);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_TacaTrainingStep)->Arg(32);

void BM_RecallAtK(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(8);
  NoGradScope no_grad;
  const Tensor queries = l2_normalize_rows(rng.normal_tensor({n, 16}, 1.0));
  const Tensor gallery = l2_normalize_rows(rng.normal_tensor({kLatentCount, 16}, 1.0));
  std::vector<std::size_t> truth(n);
  for (std::size_t i = 0; i < n; ++i) truth[i] = i % kLatentCount;
  for (auto _ : state) benchmark::DoNotOptimize(recall_at_k(queries, gallery, truth, 1));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_RecallAtK)->Arg(2048);

}  // namespace

BENCHMARK_MAIN();
